"""Synthetic corruption-shift benchmark.

Source data are Gaussian class blobs (random means on a sphere, one shared
covariance).  Corruption operators act in input space before the model; each
operator's parameters (noise subspace, scale factors, rotation planes, shift
direction) are drawn once per benchmark and its strength scales linearly with
severity, so severity 0 reproduces the clean distribution.  ``stream_draw``
selects an independent target sample draw over the same fixed benchmark,
mirroring repeated evaluation runs on a fixed corrupted test set.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..linalg import RandomStream

CORRUPTIONS = ("add_noise", "feature_scale", "rotation", "mean_shift", "blur_mix")


@dataclass
class BenchmarkSpec:
    num_classes: int = 8
    input_dim: int = 16
    source_size: int = 4096
    target_size: int = 1600
    imbalance: float = 1.0  # largest/smallest class count in target pools
    corruptions: tuple = ("add_noise", "feature_scale")
    severities: tuple = (5,)
    sphere_radius: float = 8.0
    stream_draw: int = 0  # which independent target draw of this benchmark
    # per-operator base strengths; severity multiplies these linearly
    noise_base: float = 1.0
    noise_subspace: int = 4  # dimension of the noise-carrying subspace
    scale_base: float = 0.65
    rotation_base: float = 0.12
    shift_base: float = 0.5
    blur_base: float = 0.18

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.input_dim < 2:
            raise ConfigError("need input_dim >= 2")
        if self.source_size < self.num_classes or self.target_size < self.num_classes:
            raise ConfigError("split sizes must cover every class")
        if self.imbalance < 1.0:
            raise ConfigError("imbalance ratio must be >= 1")
        unknown = set(self.corruptions) - set(CORRUPTIONS)
        if unknown:
            raise ConfigError(
                f"unknown corruptions {sorted(unknown)}; choose from {CORRUPTIONS}"
            )
        if not self.corruptions:
            raise ConfigError("need at least one corruption")
        for s in self.severities:
            if not (0 <= s <= 5):
                raise ConfigError(f"severity must be in 0..5, got {s}")
        if not (1 <= self.noise_subspace <= self.input_dim):
            raise ConfigError("noise_subspace must be in [1, input_dim]")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None
    metadata: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return int(self.metadata.get("num_classes", 0))


def class_counts(total, num_classes, ratio):
    """Geometric class-size profile: count_j proportional to ratio^(-j/(J-1)).

    Deterministic rounding: floor of the proportional share, remainder handed
    out from class 0 upward.
    """
    if ratio == 1.0:
        base = total // num_classes
        counts = np.full(num_classes, base, dtype=np.int64)
        counts[: total - base * num_classes] += 1
        return counts
    weights = ratio ** (-np.arange(num_classes) / (num_classes - 1))
    counts = np.maximum(1, np.floor(total * weights / weights.sum())).astype(np.int64)
    short = total - counts.sum()
    j = 0
    while short > 0:
        counts[j % num_classes] += 1
        short -= 1
        j += 1
    while short < 0:
        j -= 1
        k = j % num_classes
        if counts[k] > 1:
            counts[k] -= 1
            short += 1
    return counts


class _Geometry:
    """Class means on a sphere plus one shared covariance factor."""

    def __init__(self, spec, rng):
        g = rng.split("geometry")
        directions = g.standard_normal((spec.num_classes, spec.input_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        self.means = directions * spec.sphere_radius
        # shared covariance: mild anisotropy under a random rotation
        basis, _ = np.linalg.qr(g.standard_normal((spec.input_dim, spec.input_dim)))
        scales = np.sqrt(np.linspace(0.5, 1.5, spec.input_dim))
        self.cov_factor = basis * scales  # factor F with cov = F F^T

    def sample(self, counts, rng):
        labels = np.repeat(np.arange(len(counts)), counts)
        z = rng.standard_normal((labels.shape[0], self.means.shape[1]))
        x = self.means[labels] + z @ self.cov_factor.T
        order = rng.permutation(labels.shape[0])
        return x[order], labels[order]


def _smooth_circular(x):
    return 0.5 * x + 0.25 * (np.roll(x, 1, axis=1) + np.roll(x, -1, axis=1))


class Corruption:
    """One operator with its benchmark-level parameter draw fixed."""

    def __init__(self, name, spec, rng):
        if name not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {name!r}")
        self.name = name
        self.spec = spec
        d = spec.input_dim
        p = rng.split(f"params/{name}")
        if name == "add_noise":
            basis, _ = np.linalg.qr(p.standard_normal((d, d)))
            self.subspace = basis[:, : spec.noise_subspace]
        elif name == "feature_scale":
            self.log_factors = p.uniform(-1.0, 1.0, d)
        elif name == "rotation":
            self.plane_order = p.permutation(d)
        elif name == "mean_shift":
            direction = p.standard_normal(d)
            self.direction = direction / np.linalg.norm(direction)

    def apply(self, x, severity, rng):
        """Corrupt ``x`` at the given severity; ``rng`` drives only the
        per-sample noise draws (the operator itself is fixed)."""
        if severity == 0:
            return x.copy()
        spec = self.spec
        if self.name == "add_noise":
            z = rng.standard_normal((x.shape[0], self.subspace.shape[1]))
            return x + spec.noise_base * severity * (z @ self.subspace.T)
        if self.name == "feature_scale":
            return x * np.exp(spec.scale_base * severity * self.log_factors)
        if self.name == "rotation":
            out = x.copy()
            angle = spec.rotation_base * severity
            c, s = np.cos(angle), np.sin(angle)
            for k in range(x.shape[1] // 2):
                i, j = self.plane_order[2 * k], self.plane_order[2 * k + 1]
                xi, xj = out[:, i].copy(), out[:, j].copy()
                out[:, i] = c * xi - s * xj
                out[:, j] = s * xi + c * xj
            return out
        if self.name == "mean_shift":
            return x + spec.shift_base * severity * self.direction
        # blur_mix: parameter-free local averaging across the feature axis
        rho = min(1.0, spec.blur_base * severity)
        return (1.0 - rho) * x + rho * _smooth_circular(x)


def generate_benchmark(spec, rng):
    """Build (source, targets); deterministic in the rng's seed and
    ``spec.stream_draw``.

    The geometry, source split, and corruption parameters depend only on the
    rng; ``stream_draw`` varies the target sample draws.
    """
    spec.validate()
    geometry = _Geometry(spec, rng)

    src_counts = class_counts(spec.source_size, spec.num_classes, 1.0)
    x, y = geometry.sample(src_counts, rng.split("source"))
    source = Dataset(
        features=x, labels=y,
        metadata={
            "corruption": "clean", "severity": 0, "seed": rng.seed,
            "num_classes": spec.num_classes, "split": "source",
        },
    )

    tgt_counts = class_counts(spec.target_size, spec.num_classes, spec.imbalance)
    targets = []
    for name in spec.corruptions:
        operator = Corruption(name, spec, rng)
        for severity in spec.severities:
            sub = rng.split(f"target/{name}/{severity}/draw{spec.stream_draw}")
            clean_x, labels = geometry.sample(tgt_counts, sub.split("sample"))
            corrupted = operator.apply(clean_x, severity, sub.split("noise"))
            targets.append(Dataset(
                features=corrupted, labels=labels,
                metadata={
                    "corruption": name, "severity": int(severity),
                    "seed": rng.seed, "stream_draw": spec.stream_draw,
                    "num_classes": spec.num_classes, "split": "target",
                },
            ))
    return source, targets
