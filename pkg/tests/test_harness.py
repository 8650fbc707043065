import dataclasses
import json
import os

import numpy as np
import pytest

from svp_tta.errors import ConfigError, ContractViolation, DataFormatError
from svp_tta.harness.benchmark import (
    BenchmarkSpec,
    Corruption,
    Dataset,
    class_counts,
    generate_benchmark,
)
from svp_tta.harness.dataio import load_dataset, save_dataset
from svp_tta.harness.metrics import class_distance_matrix, evaluate, truncated_prediction
from svp_tta.harness import report as report_mod
from svp_tta.linalg import RandomStream, svd
from svp_tta.losses import softmax_rows


def tiny_spec(**overrides):
    base = dict(num_classes=4, input_dim=6, source_size=256, target_size=128,
                corruptions=("add_noise", "feature_scale"), severities=(5,),
                noise_subspace=2)
    base.update(overrides)
    return BenchmarkSpec(**base)


class TestClassCounts:
    def test_balanced_exact(self):
        counts = class_counts(100, 8, 1.0)
        assert counts.sum() == 100
        assert counts.max() - counts.min() <= 1

    def test_geometric_profile(self):
        counts = class_counts(1100, 4, 10.0)
        assert counts.sum() == 1100
        weights = 10.0 ** (-np.arange(4) / 3)
        expected = np.floor(1100 * weights / weights.sum())
        assert (np.abs(counts - expected) <= 1).all()
        assert counts[0] / counts[-1] == pytest.approx(10.0, rel=0.15)

    def test_monotone_nonincreasing(self):
        counts = class_counts(500, 6, 5.0)
        assert (np.diff(counts) <= 0).all()


class TestGenerateBenchmark:
    def test_deterministic(self):
        spec = tiny_spec()
        s1, t1 = generate_benchmark(spec, RandomStream(3, "benchmark"))
        s2, t2 = generate_benchmark(spec, RandomStream(3, "benchmark"))
        assert np.array_equal(s1.features, s2.features)
        assert np.array_equal(s1.labels, s2.labels)
        for a, b in zip(t1, t2):
            assert np.array_equal(a.features, b.features)

    def test_stream_draw_varies_targets_not_source(self):
        s1, t1 = generate_benchmark(tiny_spec(), RandomStream(3, "benchmark"))
        s2, t2 = generate_benchmark(tiny_spec(stream_draw=1),
                                    RandomStream(3, "benchmark"))
        assert np.array_equal(s1.features, s2.features)
        assert not np.array_equal(t1[0].features, t2[0].features)

    def test_severity_zero_is_clean(self):
        spec = tiny_spec(severities=(0,))
        _, targets = generate_benchmark(spec, RandomStream(4, "benchmark"))
        op = Corruption("add_noise", spec, RandomStream(9, "x"))
        x = targets[0].features
        assert np.array_equal(op.apply(x, 0, RandomStream(1)), x)

    def test_imbalance_counts_exact(self):
        spec = tiny_spec(imbalance=10.0)
        _, targets = generate_benchmark(spec, RandomStream(5, "benchmark"))
        counts = np.bincount(targets[0].labels, minlength=4)
        assert np.array_equal(np.sort(counts)[::-1],
                              class_counts(128, 4, 10.0))

    def test_all_corruptions_run(self):
        spec = tiny_spec(corruptions=("add_noise", "feature_scale", "rotation",
                                      "mean_shift", "blur_mix"))
        _, targets = generate_benchmark(spec, RandomStream(6, "benchmark"))
        assert len(targets) == 5
        for ds in targets:
            assert np.isfinite(ds.features).all()

    def test_rotation_preserves_norms(self):
        spec = tiny_spec()
        op = Corruption("rotation", spec, RandomStream(7, "op"))
        x = np.random.default_rng(0).standard_normal((20, 6))
        out = op.apply(x, 5, RandomStream(1))
        assert np.allclose(np.linalg.norm(out, axis=1),
                           np.linalg.norm(x, axis=1), atol=1e-12)

    def test_severity_scales_corruption_distance(self):
        spec = tiny_spec()
        op = Corruption("feature_scale", spec, RandomStream(8, "op"))
        x = np.random.default_rng(1).standard_normal((50, 6))
        dists = [np.linalg.norm(op.apply(x, s, RandomStream(2)) - x)
                 for s in (1, 2, 3, 4, 5)]
        assert all(b > a for a, b in zip(dists, dists[1:]))

    def test_invalid_specs(self):
        with pytest.raises(ConfigError):
            tiny_spec(corruptions=("warp",)).validate()
        with pytest.raises(ConfigError):
            tiny_spec(severities=(7,)).validate()
        with pytest.raises(ConfigError):
            tiny_spec(imbalance=0.5).validate()

    def test_noise_severity_degrades_source_model(self):
        # source-model error non-decreasing in severity, averaged over draws
        from svp_tta.model import TrainConfig, forward, init_and_train_source

        spec = tiny_spec(corruptions=("add_noise",), severities=(1, 3, 5),
                         source_size=512, target_size=256)
        source, _ = generate_benchmark(spec, RandomStream(0, "benchmark"))
        params, _ = init_and_train_source(
            source.features, source.labels, 4,
            TrainConfig(hidden=(16, 12, 8), epochs=30), RandomStream(0, "t"))
        by_severity = {s: [] for s in (1, 3, 5)}
        for draw in range(5):
            spec_d = dataclasses.replace(spec, stream_draw=draw)
            _, targets = generate_benchmark(spec_d, RandomStream(0, "benchmark"))
            for ds in targets:
                preds = forward(params, ds.features, "running").probs.argmax(axis=1)
                by_severity[ds.metadata["severity"]].append(
                    float((preds != ds.labels).mean()))
        means = [np.mean(by_severity[s]) for s in (1, 3, 5)]
        assert means[0] <= means[1] <= means[2]


class TestDataIo:
    def test_round_trip(self, tmp_path):
        _, targets = generate_benchmark(tiny_spec(), RandomStream(10, "benchmark"))
        ds = targets[0]
        path = str(tmp_path / "t.ttad")
        save_dataset(ds, path)
        back = load_dataset(path)
        assert np.array_equal(back.features,
                              ds.features.astype(np.float32).astype(np.float64))
        assert np.array_equal(back.labels, ds.labels)
        assert back.metadata["corruption"] == ds.metadata["corruption"]

    def test_unlabeled_round_trip(self, tmp_path):
        ds = Dataset(features=np.ones((3, 2)), labels=None,
                     metadata={"num_classes": 2})
        path = str(tmp_path / "u.ttad")
        save_dataset(ds, path)
        assert load_dataset(path).labels is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ttad"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(DataFormatError):
            load_dataset(str(path))

    def test_truncation_names_offset(self, tmp_path):
        _, targets = generate_benchmark(tiny_spec(), RandomStream(11, "benchmark"))
        path = str(tmp_path / "t.ttad")
        save_dataset(targets[0], path)
        data = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(data[:30])
        with pytest.raises(DataFormatError) as err:
            load_dataset(path)
        assert err.value.offset is not None

    def test_missing_file_is_format_error(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_dataset(str(tmp_path / "absent.ttad"))


class TestEvaluate:
    def test_perfect(self):
        y = np.array([0, 1, 2, 1])
        m = evaluate(y, y, 3)
        assert m.error == 0.0
        assert m.confusion.trace() == 4

    def test_constant_predictor_on_balanced(self):
        truth = np.repeat(np.arange(4), 25)
        preds = np.zeros(100, dtype=int)
        m = evaluate(preds, truth, 4)
        assert m.error == pytest.approx(0.75)

    def test_matches_recount_oracle(self):
        rng = np.random.default_rng(12)
        truth = rng.integers(0, 5, 200)
        preds = rng.integers(0, 5, 200)
        m = evaluate(preds, truth, 5)
        wrong = sum(1 for p, t in zip(preds, truth) if p != t)
        assert m.error == pytest.approx(wrong / 200)
        for j in range(5):
            rows = [(p, t) for p, t in zip(preds, truth) if t == j]
            expected = sum(1 for p, t in rows if p != t) / len(rows)
            assert m.per_class_error[j] == pytest.approx(expected)

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            evaluate(np.array([0]), np.array([0, 1]), 2)


class TestClassDistance:
    def test_two_point_closed_form(self):
        f = np.array([[0.0, 0.0], [3.0, 4.0]])
        matrix, missing = class_distance_matrix(f, np.array([0, 1]), 2)
        assert matrix[0, 0] == 0.0 and matrix[1, 1] == 0.0
        assert matrix[0, 1] == pytest.approx(5.0)
        assert matrix[1, 0] == pytest.approx(5.0)
        assert not missing.any()

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(13)
        f = rng.standard_normal((60, 4))
        y = rng.integers(0, 3, 60)
        matrix, _ = class_distance_matrix(f, y, 3)
        for j in range(3):
            rows = f[y == j]
            centroid = rows.mean(axis=0)
            expected = np.linalg.norm(rows - centroid, axis=1).mean()
            assert matrix[j, j] == pytest.approx(expected, abs=1e-12)
        for i in range(3):
            for j in range(3):
                if i != j:
                    ci = f[y == i].mean(axis=0)
                    cj = f[y == j].mean(axis=0)
                    assert matrix[i, j] == pytest.approx(
                        np.linalg.norm(ci - cj), abs=1e-12)

    def test_missing_class_nan_and_flag(self):
        f = np.ones((4, 2))
        matrix, missing = class_distance_matrix(f, np.zeros(4, dtype=int), 3)
        assert missing[1] and missing[2] and not missing[0]
        assert np.isnan(matrix[1]).all() and np.isnan(matrix[:, 1]).all()


class TestTruncatedPrediction:
    def test_drop_zero_is_argmax(self):
        rng = np.random.default_rng(14)
        p = softmax_rows(rng.standard_normal((20, 5)))
        assert np.array_equal(truncated_prediction(p, 0), p.argmax(axis=1))

    def test_rank_one_invariant_to_drops(self):
        row = np.array([0.1, 0.2, 0.3, 0.4])
        p = np.tile(row, (6, 1))
        base = truncated_prediction(p, 0)
        for drop in range(1, 4):
            assert np.array_equal(truncated_prediction(p, drop), base)

    def test_matches_explicit_zeroing_oracle(self):
        rng = np.random.default_rng(15)
        p = softmax_rows(rng.standard_normal((12, 5)))
        res = svd(p)
        sigma = res.sigma.copy()
        sigma[-1] = 0.0
        recon = res.u @ (sigma[:, None] * res.v.T)
        assert np.array_equal(truncated_prediction(p, 1), recon.argmax(axis=1))

    def test_drop_bounds(self):
        p = softmax_rows(np.random.default_rng(16).standard_normal((6, 3)))
        with pytest.raises(ContractViolation):
            truncated_prediction(p, 3)
        with pytest.raises(ContractViolation):
            truncated_prediction(p, -1)


class TestReportDocument:
    def test_canonical_and_atomic(self, tmp_path):
        payload = {"b": [1.5, None], "a": {"x": 2}}
        path = str(tmp_path / "doc.json")
        report_mod.write_document(payload, path)
        text = open(path).read()
        assert text == report_mod.dumps_canonical(payload)
        assert json.loads(text) == {"a": {"x": 2}, "b": [1.5, None]}
        assert not [p for p in os.listdir(tmp_path) if p.startswith(".tmp")]

    def test_non_finite_becomes_null(self):
        doc = report_mod._jsonify({"v": float("nan"), "w": np.float64("inf")})
        assert doc["v"] is None and doc["w"] is None

    def test_read_errors(self, tmp_path):
        with pytest.raises(DataFormatError):
            report_mod.read_document(str(tmp_path / "missing.json"))
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        with pytest.raises(DataFormatError):
            report_mod.read_document(str(bad))
