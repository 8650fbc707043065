"""Command-line interface.

Subcommands: gen, train, adapt, sweep, ablate, diag, gradcheck.  Adaptation
flags mirror the AdaptConfig field names; values resolve as
defaults < config file < SVPTTA_* environment variables < explicit flags.
Exit code 0 on success; failures print ``error[<category>]: message`` and map
to config=2, format=3, contract=4, numeric=5, internal=1.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from .. import backend_name, gradcheck
from ..adapt import AdaptConfig, METHODS, StreamBatch, init_state, run_stream
from ..errors import ConfigError, SvpTtaError
from ..linalg import RandomStream
from ..model import TrainConfig, forward, init_and_train_source, load_params, save_params
from ..stats import stats_from_dict
from .benchmark import BenchmarkSpec, CORRUPTIONS, Dataset, generate_benchmark
from .dataio import load_dataset, save_dataset
from .metrics import class_distance_matrix, truncated_prediction
from .report import read_document, write_document, write_report

ENV_PREFIX = "SVPTTA_"
EXIT_CODES = {"config": 2, "format": 3, "contract": 4, "numeric": 5, "internal": 1}

ABLATION_ARMS = {
    "ent": {"method": "tent"},
    "ent_double": {"method": "tent", "double_pass": True},
    "svd": {"method": "svp_only", "alpha2": 0.0},
    "svd_var": {"method": "svp_only"},
    "ent_svd_var": {"method": "svp_only", "entropy_in_pass1": True},
    "sda": {"method": "sda_only"},
    "ent_sda": {"method": "sda_only", "entropy_in_pass1": True},
    "full": {"method": "svp_sda"},
}


def _parse_bool(raw):
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _coerce(field, raw):
    t = field.type
    if isinstance(t, str):
        t = {"bool": bool, "int": int, "float": float, "str": str,
             "int | None": int | None}.get(t, str)
    if t is bool:
        return _parse_bool(raw)
    if t is int:
        return int(raw)
    if t is float:
        return float(raw)
    if t == (int | None):
        low = str(raw).strip().lower()
        return None if low in ("", "none", "unknown") else int(raw)
    return str(raw)


def load_config_file(path):
    """Flat ``key = value`` file; '#' starts a comment."""
    pairs = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(
                        f"{path}:{lineno}: expected 'key = value', got {text!r}")
                key, value = text.split("=", 1)
                pairs[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return pairs


def resolve_adapt_config(args):
    """defaults < config file < environment < explicit flags."""
    config_fields = {f.name: f for f in dataclasses.fields(AdaptConfig)}
    values = {}

    if getattr(args, "config", None):
        for key, raw in load_config_file(args.config).items():
            if key not in config_fields:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(config_fields[key], raw)

    for name, field in config_fields.items():
        raw = os.environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            values[name] = _coerce(field, raw)

    for name in config_fields:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag

    config = AdaptConfig(**values)
    config.validate()
    return config


def add_adapt_flags(parser):
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--method", choices=METHODS)
    parser.add_argument("--alpha1", type=float)
    parser.add_argument("--alpha2", type=float)
    parser.add_argument("--beta0", type=float)
    parser.add_argument("--t-aug", dest="t_aug", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--total-batches", dest="total_batches", type=int)
    parser.add_argument("--warmup", type=int)
    parser.add_argument("--min-count", dest="min_count", type=int)
    parser.add_argument("--reset-policy", dest="reset_policy",
                        choices=("never", "per_corruption"))
    parser.add_argument("--update-head", dest="update_head",
                        action="store_const", const=True)
    parser.add_argument("--entropy-in-pass1", dest="entropy_in_pass1",
                        action="store_const", const=True)
    parser.add_argument("--double-pass", dest="double_pass",
                        action="store_const", const=True)
    parser.add_argument("--joint-update", dest="joint_update",
                        action="store_const", const=True)
    parser.add_argument("--save-stats", dest="save_stats",
                        action="store_const", const=True)


def _csv_ints(raw):
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _csv_floats(raw):
    return tuple(float(x) for x in raw.split(",") if x.strip())


def _csv_names(raw):
    return tuple(x.strip() for x in raw.split(",") if x.strip())


def make_stream(datasets, batch_size):
    """Cut ordered datasets into sequential batches; a trailing batch smaller
    than 2 rows is dropped."""
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    stream = []
    for ds in datasets:
        meta = ds.metadata
        segment = f"{meta.get('corruption', 'stream')}_s{meta.get('severity', 0)}"
        n = ds.features.shape[0]
        for start in range(0, n, batch_size):
            feats = ds.features[start:start + batch_size]
            if feats.shape[0] < 2:
                break
            labels = None if ds.labels is None else ds.labels[start:start + batch_size]
            stream.append(StreamBatch(features=feats, labels=labels, segment=segment))
    return stream


def run_adapted_stream(params, datasets, config, initial_stats=None):
    stream = make_stream(datasets, config.batch_size)
    if config.total_batches is None and stream:
        config = dataclasses.replace(config, total_batches=len(stream))
    state = init_state(params, config)
    if initial_stats is not None:
        if (initial_stats.num_classes != state.stats.num_classes
                or initial_stats.feature_dim != state.stats.feature_dim):
            raise ConfigError("resumed class stats do not match the model")
        state.stats = initial_stats.copy()
    return run_stream(state, stream, config)


def cmd_gen(args):
    spec = BenchmarkSpec(
        num_classes=args.classes,
        input_dim=args.input_dim,
        source_size=args.source_size,
        target_size=args.target_size,
        imbalance=args.imbalance,
        corruptions=_csv_names(args.corruptions),
        severities=_csv_ints(args.severities),
        sphere_radius=args.sphere_radius,
    )
    spec.validate()
    rng = RandomStream(args.seed, "benchmark")
    source, targets = generate_benchmark(spec, rng)

    os.makedirs(args.out, exist_ok=True)
    files = {}
    path = os.path.join(args.out, "source.ttad")
    save_dataset(source, path)
    files["source"] = "source.ttad"
    for ds in targets:
        name = f"{ds.metadata['corruption']}_s{ds.metadata['severity']}.ttad"
        save_dataset(ds, os.path.join(args.out, name))
        files[name[:-5]] = name
    manifest = {
        "schema_version": 1,
        "seed": args.seed,
        "spec": dataclasses.asdict(spec),
        "files": files,
    }
    write_document(manifest, os.path.join(args.out, "manifest.json"))
    print(f"wrote source + {len(targets)} target split(s) to {args.out}")
    return 0


def cmd_train(args):
    ds = load_dataset(args.data)
    if ds.labels is None:
        raise ConfigError(f"dataset {args.data} has no labels; cannot train")
    config = TrainConfig(
        hidden=_csv_ints(args.hidden),
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        val_fraction=args.val_fraction,
    )
    rng = RandomStream(args.seed, "train")
    params, info = init_and_train_source(
        ds.features, ds.labels, ds.num_classes, config, rng)
    save_params(params, args.out)
    print(
        f"trained {config.epochs} epochs; held-out clean error "
        f"{info.val_error:.4f} over {info.val_size} samples; wrote {args.out}"
    )
    return 0


def cmd_adapt(args):
    params = load_params(args.model)
    datasets = [load_dataset(p) for p in args.data]
    config = resolve_adapt_config(args)
    initial_stats = None
    if args.resume_stats:
        doc = read_document(args.resume_stats)
        payload = doc.get("class_stats")
        if payload is None:
            raise ConfigError(
                f"{args.resume_stats} carries no class_stats checkpoint "
                "(rerun the earlier stream with --save-stats)")
        initial_stats = stats_from_dict(payload)
    report = run_adapted_stream(params, datasets, config, initial_stats)
    write_report(report, args.report)
    err = report.aggregate["error"]
    err_text = "n/a (unlabeled stream)" if err is None else f"{err:.4f}"
    print(
        f"method={config.method} batches={report.diagnostics['batches_processed']} "
        f"error={err_text} wall={report.wall_clock_seconds:.2f}s "
        f"backend={backend_name()} report={args.report}"
    )
    return 0


def cmd_sweep(args):
    params = load_params(args.model)
    datasets = [load_dataset(p) for p in args.data]
    base = resolve_adapt_config(args)
    runs = []
    summary = []
    for a1 in args.alpha1_grid:
        for a2 in args.alpha2_grid:
            for b0 in args.beta0_grid:
                errors = []
                for seed_offset in range(args.seeds):
                    config = dataclasses.replace(
                        base, alpha1=a1, alpha2=a2, beta0=b0,
                        seed=base.seed + seed_offset)
                    report = run_adapted_stream(params, datasets, config)
                    err = report.aggregate["error"]
                    if err is None:
                        raise ConfigError("sweep needs labeled target data")
                    errors.append(err)
                    runs.append({
                        "alpha1": a1, "alpha2": a2, "beta0": b0,
                        "seed": config.seed, "error": err,
                    })
                arr = np.asarray(errors)
                summary.append({
                    "alpha1": a1, "alpha2": a2, "beta0": b0,
                    "mean_error": float(arr.mean()),
                    "stderr": float(arr.std(ddof=1) / np.sqrt(len(arr)))
                    if len(arr) > 1 else 0.0,
                })
    document = {
        "schema_version": 1,
        "kind": "sweep",
        "method": base.method,
        "runs": runs,
        "summary": summary,
    }
    write_document(document, args.report)
    best = min(summary, key=lambda row: row["mean_error"])
    print(
        f"swept {len(summary)} combinations x {args.seeds} seed(s); best "
        f"alpha1={best['alpha1']} alpha2={best['alpha2']} beta0={best['beta0']} "
        f"mean error {best['mean_error']:.4f}; report={args.report}"
    )
    return 0


def cmd_ablate(args):
    params = load_params(args.model)
    datasets = [load_dataset(p) for p in args.data]
    base = resolve_adapt_config(args)
    arms = _csv_names(args.arms)
    unknown = set(arms) - set(ABLATION_ARMS)
    if unknown:
        raise ConfigError(
            f"unknown ablation arms {sorted(unknown)}; "
            f"choose from {sorted(ABLATION_ARMS)}")
    table = []
    for arm in arms:
        errors = []
        for seed_offset in range(args.seeds):
            config = dataclasses.replace(
                base, seed=base.seed + seed_offset, **ABLATION_ARMS[arm])
            report = run_adapted_stream(params, datasets, config)
            err = report.aggregate["error"]
            if err is None:
                raise ConfigError("ablation needs labeled target data")
            errors.append(err)
        arr = np.asarray(errors)
        table.append({
            "arm": arm,
            "errors": errors,
            "mean_error": float(arr.mean()),
            "stderr": float(arr.std(ddof=1) / np.sqrt(len(arr)))
            if len(arr) > 1 else 0.0,
        })
    document = {"schema_version": 1, "kind": "ablation", "arms": table}
    write_document(document, args.report)
    for row in table:
        print(f"{row['arm']:>12}: mean error {row['mean_error']:.4f} "
              f"+- {row['stderr']:.4f}")
    print(f"report={args.report}")
    return 0


def cmd_diag(args):
    params = load_params(args.model)
    ds = load_dataset(args.data)
    if ds.labels is None:
        raise ConfigError(f"dataset {args.data} has no labels; diagnostics need truth")
    num_classes = params.arch.num_classes

    features = []
    drop_wrong = None
    scored = 0
    n = ds.features.shape[0]
    for start in range(0, n, args.batch_size):
        x = ds.features[start:start + args.batch_size]
        y = ds.labels[start:start + args.batch_size]
        if x.shape[0] < 2 and args.bn_mode == "batch":
            break
        cache = forward(params, x, args.bn_mode)
        features.append(cache.features)
        max_drop = min(x.shape[0], num_classes)
        if drop_wrong is None:
            drop_wrong = np.zeros(max_drop, dtype=np.int64)
        for drop in range(drop_wrong.shape[0]):
            preds = truncated_prediction(cache.probs, drop)
            drop_wrong[drop] += int((preds != y).sum())
        scored += x.shape[0]

    feats = np.concatenate(features, axis=0)
    labels = ds.labels[:feats.shape[0]]
    matrix, missing = class_distance_matrix(feats, labels, num_classes)
    document = {
        "schema_version": 1,
        "kind": "diagnostics",
        "bn_mode": args.bn_mode,
        "class_distance": [[None if np.isnan(v) else v for v in row]
                           for row in matrix.tolist()],
        "missing_classes": [int(j) for j in np.nonzero(missing)[0]],
        "truncation_curve": [
            {"drop": d, "error": float(drop_wrong[d] / scored)}
            for d in range(drop_wrong.shape[0])
        ],
        "scored_samples": int(scored),
    }
    write_document(document, args.report)
    if args.export_embeddings:
        emb = Dataset(
            features=feats, labels=labels,
            metadata={**ds.metadata, "split": "embeddings",
                      "bn_mode": args.bn_mode},
        )
        save_dataset(emb, args.export_embeddings)
        print(f"exported embeddings to {args.export_embeddings}")
    print(f"diagnostics over {scored} samples; report={args.report}")
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_all(
        instances=args.instances,
        end_to_end_instances=args.end_to_end_instances,
        seed=args.seed,
    )
    failed = False
    rows = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed = failed or not r.passed
        print(f"{status} {r.name:<22} max rel err {r.max_error:.3e} "
              f"(tol {r.tolerance:.0e}, {r.instances} instances)")
        rows.append({
            "name": r.name, "max_error": r.max_error,
            "tolerance": r.tolerance, "instances": r.instances,
            "passed": r.passed,
        })
    if args.report:
        write_document(
            {"schema_version": 1, "kind": "gradcheck", "suites": rows},
            args.report)
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="svp-tta",
        description="Test-time adaptation engine with singular-value "
                    "penalization and semantic feature augmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic corruption benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--input-dim", dest="input_dim", type=int, default=16)
    p.add_argument("--source-size", dest="source_size", type=int, default=4096)
    p.add_argument("--target-size", dest="target_size", type=int, default=1600)
    p.add_argument("--imbalance", type=float, default=1.0)
    p.add_argument("--corruptions", default="add_noise,feature_scale",
                   help=f"comma-separated subset of {CORRUPTIONS}")
    p.add_argument("--severities", default="5", help="comma-separated 0..5")
    p.add_argument("--sphere-radius", dest="sphere_radius", type=float, default=4.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the source model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", default="64,64,32")
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="run a streaming adaptation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, nargs="+",
                   help="ordered target dataset files (stream segments)")
    p.add_argument("--report", required=True)
    p.add_argument("--resume-stats", dest="resume_stats",
                   help="earlier report whose class_stats checkpoint seeds "
                        "this run (requires it was written with --save-stats)")
    add_adapt_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="grid over alpha1/alpha2/beta0")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--report", required=True)
    p.add_argument("--alpha1-grid", dest="alpha1_grid", type=_csv_floats,
                   default=(0.5, 1.0, 2.0))
    p.add_argument("--alpha2-grid", dest="alpha2_grid", type=_csv_floats,
                   default=(0.0, 0.3, 1.0))
    p.add_argument("--beta0-grid", dest="beta0_grid", type=_csv_floats,
                   default=(0.25, 0.5, 1.0))
    p.add_argument("--seeds", type=int, default=3)
    add_adapt_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run the ablation arms")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--report", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--arms", default=",".join(ABLATION_ARMS))
    add_adapt_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diag", help="class-distance matrix and truncation curve")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--bn-mode", dest="bn_mode", choices=("batch", "running"),
                   default="batch")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--export-embeddings", dest="export_embeddings")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--end-to-end-instances", dest="end_to_end_instances",
                   type=int, default=10)
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SvpTtaError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
