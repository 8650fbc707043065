"""Streaming adaptation engine.

One interface covers the frozen baselines (source, norm), entropy
minimization (tent), and the two-backpropagation method: a singular-value
penalization update on the prediction matrix, then a semantic-augmentation
update driven by pseudo-labels.  Predictions handed to the caller always
come from the first forward pass of the batch.
"""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import augment_features, sda_loss
from .errors import ConfigError, ContractViolation
from .linalg import RandomStream, as_matrix, svd
from .losses import entropy_loss, softmax_backward, svp_loss
from .model import AdamState, adam_step, backward, forward
from .stats import ClassStats, batch_moments, beta_schedule, merge_stats, stats_to_dict
from .harness.report import StreamReport

METHODS = ("source", "norm", "tent", "svp_sda", "svp_only", "sda_only")
RESET_POLICIES = ("never", "per_corruption")


@dataclass
class AdaptConfig:
    method: str = "svp_sda"
    alpha1: float = 1.0
    alpha2: float = 0.3
    beta0: float = 0.5
    t_aug: int = 4
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    total_batches: int | None = None
    warmup: int = 50
    min_count: int = 2
    reset_policy: str = "never"
    update_head: bool = False
    entropy_in_pass1: bool = False
    double_pass: bool = False
    joint_update: bool = False
    save_stats: bool = False

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.alpha1 < 0 or self.alpha2 < 0 or self.beta0 < 0:
            raise ConfigError("alpha1, alpha2, beta0 must be non-negative")
        if self.t_aug < 1:
            raise ConfigError("t_aug must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.method != "source" and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch-BN methods")
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        if self.min_count < 0:
            raise ConfigError("min_count must be >= 0")
        if self.total_batches is not None and self.total_batches < 1:
            raise ConfigError("total_batches must be >= 1 when given")
        if self.reset_policy not in RESET_POLICIES:
            raise ConfigError(
                f"unknown reset_policy {self.reset_policy!r}; choose from {RESET_POLICIES}"
            )

    @property
    def adapt_set(self):
        return "bn_affine_plus_head" if self.update_head else "bn_affine"


@dataclass
class AdaptState:
    params: object
    opt: AdamState
    stats: ClassStats
    m: int
    rng: RandomStream


def init_state(params, config):
    config.validate()
    return AdaptState(
        params=params.copy(),
        opt=AdamState(lr=config.lr),
        stats=ClassStats.empty(params.arch.num_classes, params.arch.feature_dim),
        m=0,
        rng=RandomStream(config.seed, "adapt/augment"),
    )


@dataclass
class StreamBatch:
    features: np.ndarray
    labels: np.ndarray | None = None
    segment: str = "stream"


@dataclass
class BatchTrace:
    index: int
    segment: str
    size: int
    losses: dict = field(default_factory=dict)
    beta: float | None = None
    sigma: list = field(default_factory=list)
    error: float | None = None


def _second_pass(state, config, cache, pseudo):
    """Statistics merge, augmentation, and the SDA update; returns loss value."""
    num_classes = state.params.arch.num_classes
    moments = batch_moments(cache.features, pseudo, num_classes)
    state.stats = merge_stats(state.stats, moments)
    beta = beta_schedule(state.m, config.total_batches, config.beta0, config.warmup)
    aug = augment_features(
        cache.features, pseudo, state.stats, beta, config.t_aug,
        config.min_count, state.rng,
    )
    sda = sda_loss(aug, state.params.head_w, state.params.head_b)
    grad_f = np.zeros_like(cache.features)
    np.add.at(grad_f, aug.source_index, sda.grad_features)
    grads = backward(state.params, cache, grad_features=grad_f,
                     adapt_set=config.adapt_set)
    if config.update_head:
        grads["head.w"] = grads.get("head.w", 0.0) + sda.grad_weights
        grads["head.b"] = grads.get("head.b", 0.0) + sda.grad_bias
    state.params, state.opt = adam_step(state.opt, state.params, grads)
    return beta, sda.value


def adapt_batch(state, batch, config):
    """Process one unlabeled batch; returns (predictions, trace).

    Predictions are the argmax of the first forward pass and never depend on
    this batch's second update.  The source baseline leaves the state
    untouched.
    """
    x = as_matrix(batch, "batch")
    method = config.method

    if method == "source":
        cache = forward(state.params, x, "running")
        preds = cache.probs.argmax(axis=1)
        trace = BatchTrace(index=state.m, segment="", size=x.shape[0],
                           sigma=svd(cache.probs).sigma.tolist())
        return preds, trace

    if x.shape[0] < 2:
        raise ContractViolation("batch-BN methods need batches of at least 2 rows")

    state.m += 1
    cache = forward(state.params, x, "batch")
    probs = cache.probs
    preds = probs.argmax(axis=1)
    trace = BatchTrace(index=state.m, segment="", size=x.shape[0],
                       sigma=svd(probs).sigma.tolist())

    grad_terms = []
    if method in ("svp_sda", "svp_only") and (config.alpha1 > 0 or config.alpha2 > 0):
        svp = svp_loss(probs, config.alpha1, config.alpha2)
        trace.losses["svp"] = svp.value
        grad_terms.append(svp.grad)
    if method == "tent" or config.entropy_in_pass1:
        ent = entropy_loss(probs)
        trace.losses["entropy"] = ent.value
        grad_terms.append(ent.grad)

    wants_second = method in ("svp_sda", "sda_only")

    if config.joint_update and wants_second and grad_terms:
        # single forward, single step: prediction-matrix losses plus the
        # augmentation loss folded into one gradient
        num_classes = state.params.arch.num_classes
        moments = batch_moments(cache.features, preds, num_classes)
        state.stats = merge_stats(state.stats, moments)
        beta = beta_schedule(state.m, config.total_batches, config.beta0, config.warmup)
        aug = augment_features(cache.features, preds, state.stats, beta,
                               config.t_aug, config.min_count, state.rng)
        sda = sda_loss(aug, state.params.head_w, state.params.head_b)
        trace.losses["sda"] = sda.value
        trace.beta = beta
        grad_f = np.zeros_like(cache.features)
        np.add.at(grad_f, aug.source_index, sda.grad_features)
        grad_logits = softmax_backward(probs, sum(grad_terms))
        grads = backward(state.params, cache, grad_logits=grad_logits,
                         grad_features=grad_f, adapt_set=config.adapt_set)
        if config.update_head:
            grads["head.w"] = grads.get("head.w", 0.0) + sda.grad_weights
            grads["head.b"] = grads.get("head.b", 0.0) + sda.grad_bias
        state.params, state.opt = adam_step(state.opt, state.params, grads)
        return preds, trace

    updated = False
    if grad_terms:
        grad_logits = softmax_backward(probs, sum(grad_terms))
        grads = backward(state.params, cache, grad_logits=grad_logits,
                         adapt_set=config.adapt_set)
        state.params, state.opt = adam_step(state.opt, state.params, grads)
        updated = True

    if method == "tent" and config.double_pass:
        cache2 = forward(state.params, x, "batch")
        ent2 = entropy_loss(cache2.probs)
        trace.losses["entropy_second"] = ent2.value
        grads = backward(state.params, cache2,
                         grad_logits=softmax_backward(cache2.probs, ent2.grad),
                         adapt_set=config.adapt_set)
        state.params, state.opt = adam_step(state.opt, state.params, grads)

    if wants_second:
        cache2 = forward(state.params, x, "batch") if updated else cache
        beta, sda_value = _second_pass(state, config, cache2, preds)
        trace.beta = beta
        trace.losses["sda"] = sda_value

    return preds, trace


def run_stream(state, batches, config):
    """Drive the engine over an ordered batch sequence and build the report.

    Ground-truth labels, when a batch carries them, are used for scoring
    only.  The reset policy applies at segment boundaries.
    """
    config.validate()
    num_classes = state.params.arch.num_classes
    records = []
    segments = []
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    seg_totals = {}
    total = 0
    wrong = 0
    started = time.perf_counter()

    prev_segment = None
    for index, sb in enumerate(batches, start=1):
        if (
            prev_segment is not None
            and sb.segment != prev_segment
            and config.reset_policy == "per_corruption"
        ):
            state.stats = ClassStats.empty(num_classes, state.params.arch.feature_dim)
            state.m = 0
        if sb.segment != prev_segment:
            segments.append(sb.segment)
        prev_segment = sb.segment

        preds, trace = adapt_batch(state, sb.features, config)
        trace.index = index
        trace.segment = sb.segment
        if sb.labels is not None:
            labels = np.asarray(sb.labels)
            miss = int((preds != labels).sum())
            trace.error = miss / labels.shape[0]
            np.add.at(confusion, (labels, preds), 1)
            seg = seg_totals.setdefault(sb.segment, [0, 0])
            seg[0] += miss
            seg[1] += labels.shape[0]
            wrong += miss
            total += labels.shape[0]
        records.append({
            "index": trace.index,
            "segment": trace.segment,
            "size": trace.size,
            "error": trace.error,
            "losses": trace.losses,
            "beta": trace.beta,
            "sigma": trace.sigma,
        })

    row_totals = confusion.sum(axis=1)
    per_class = [
        None if row_totals[j] == 0
        else 1.0 - confusion[j, j] / row_totals[j]
        for j in range(num_classes)
    ]
    aggregate = {
        "error": (wrong / total) if total else None,
        "scored_samples": int(total),
        "per_class_error": per_class,
        "confusion": confusion.tolist(),
    }
    diagnostics = {
        "per_segment_error": {
            seg: (miss / count if count else None)
            for seg, (miss, count) in seg_totals.items()
        },
        "batches_processed": len(records),
    }
    report = StreamReport(
        config=asdict(config),
        segments=segments,
        batches=records,
        aggregate=aggregate,
        diagnostics=diagnostics,
        class_stats=stats_to_dict(state.stats) if config.save_stats else None,
    )
    report.wall_clock_seconds = time.perf_counter() - started
    return report
