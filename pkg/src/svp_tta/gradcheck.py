"""Central finite-difference verification of every analytic gradient.

Shared by the test suite and the ``gradcheck`` CLI command.  Each suite
returns its worst relative Frobenius error over seeded random instances;
callers compare against the tolerances below.
"""

from dataclasses import dataclass

import numpy as np

from .augment import AugmentedBatch, augment_features, sda_loss
from .linalg import RandomStream, svd
from .losses import (
    cross_entropy_loss,
    entropy_loss,
    softmax_backward,
    softmax_rows,
    svd_sum_loss,
    svd_var_loss,
    svp_loss,
)
from .model import Architecture, backward, forward, get_tensor, init_params, set_tensor
from .stats import ClassStats, batch_moments, merge_stats

FD_STEP = 1e-6
SVD_GAP = 1e-3  # minimum singular-value gap for the SVD-loss suites

TOLERANCES = {
    "svd_sum_loss": 1e-5,
    "svd_var_loss": 1e-5,
    "svp_loss": 1e-5,
    "entropy_loss": 1e-6,
    "cross_entropy_loss": 1e-6,
    "sda_loss": 1e-5,
    "end_to_end_entropy": 1e-4,
    "end_to_end_svp": 1e-4,
    "end_to_end_sda": 1e-4,
}


def central_diff(f, x, h=FD_STEP):
    """Entrywise central finite differences of a scalar function."""
    g = np.zeros_like(x)
    flat = x.ravel()
    out = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return g


def rel_error(approx, exact):
    scale = max(np.linalg.norm(approx), np.linalg.norm(exact), 1e-30)
    return float(np.linalg.norm(approx - exact) / scale)


def gapped_prob_matrix(rng, rows, cols, min_gap=SVD_GAP, tries=200):
    """Random row-stochastic matrix whose singular values are well separated
    (including the gap above zero), so the SVD losses are differentiable."""
    for _ in range(tries):
        p = softmax_rows(1.5 * rng.standard_normal((rows, cols)))
        sigma = svd(p).sigma
        gaps = np.diff(sigma)
        if sigma[-1] > min_gap and (np.abs(gaps) > min_gap).all():
            return p
    raise RuntimeError("could not find a gap-separated probability matrix")


@dataclass
class SuiteResult:
    name: str
    max_error: float
    instances: int

    @property
    def tolerance(self):
        return TOLERANCES[self.name]

    @property
    def passed(self):
        return self.max_error <= self.tolerance


def _run_matrix_suite(name, make_input, loss_fn, instances, seed):
    rng = RandomStream(seed, f"gradcheck/{name}")
    worst = 0.0
    for _ in range(instances):
        x = make_input(rng)
        res = loss_fn(x)
        fd = central_diff(lambda m: loss_fn(m).value, x.copy())
        worst = max(worst, rel_error(fd, res.grad))
    return SuiteResult(name=name, max_error=worst, instances=instances)


def check_svd_sum(instances=50, seed=0):
    return _run_matrix_suite(
        "svd_sum_loss", lambda rng: gapped_prob_matrix(rng, 8, 4),
        svd_sum_loss, instances, seed)


def check_svd_var(instances=50, seed=0):
    return _run_matrix_suite(
        "svd_var_loss", lambda rng: gapped_prob_matrix(rng, 8, 4),
        svd_var_loss, instances, seed)


def check_svp(instances=50, seed=0, alpha1=1.0, alpha2=0.3):
    return _run_matrix_suite(
        "svp_loss", lambda rng: gapped_prob_matrix(rng, 8, 4),
        lambda p: svp_loss(p, alpha1, alpha2), instances, seed)


def check_entropy(instances=50, seed=0):
    def make(rng):
        return softmax_rows(rng.standard_normal((6, 4)))
    return _run_matrix_suite("entropy_loss", make, entropy_loss, instances, seed)


def check_cross_entropy(instances=50, seed=0):
    rng = RandomStream(seed, "gradcheck/cross_entropy")
    worst = 0.0
    for _ in range(instances):
        logits = rng.standard_normal((10, 5))
        labels = rng.integers(0, 5, shape=10)
        res = cross_entropy_loss(logits, labels)
        fd = central_diff(lambda o: cross_entropy_loss(o, labels).value, logits.copy())
        worst = max(worst, rel_error(fd, res.grad))
    return SuiteResult("cross_entropy_loss", worst, instances)


def check_sda(instances=50, seed=0):
    """All three SDA gradients (features, weights, bias) against FD."""
    rng = RandomStream(seed, "gradcheck/sda")
    worst = 0.0
    for _ in range(instances):
        k, t, dim, classes = 5, 2, 4, 3
        feats = rng.standard_normal((k * t, dim))
        labels = np.repeat(rng.integers(0, classes, shape=k), t)
        src = np.repeat(np.arange(k), t)
        w = rng.standard_normal((classes, dim))
        b = rng.standard_normal(classes)

        def value(f=feats, wt=w, bs=b):
            return sda_loss(AugmentedBatch(f, labels, src), wt, bs).value

        res = sda_loss(AugmentedBatch(feats, labels, src), w, b)
        worst = max(worst, rel_error(
            central_diff(lambda f: value(f=f), feats.copy()), res.grad_features))
        worst = max(worst, rel_error(
            central_diff(lambda wt: value(wt=wt), w.copy()), res.grad_weights))
        worst = max(worst, rel_error(
            central_diff(lambda bs: value(bs=bs), b.copy()), res.grad_bias))
    return SuiteResult("sda_loss", worst, instances)


def _bn_affine_keys(params):
    keys = []
    for i in range(len(params.layers)):
        keys.append(f"layers.{i}.gamma")
        keys.append(f"layers.{i}.beta")
    return keys


def _random_model(rng, input_dim=6, hidden=(10, 8, 5), classes=4):
    arch = Architecture(input_dim=input_dim, hidden=hidden, num_classes=classes)
    params = init_params(arch, rng)
    for lp in params.layers:
        lp.gamma = 1.0 + 0.3 * rng.standard_normal(lp.gamma.shape)
        lp.beta = 0.3 * rng.standard_normal(lp.beta.shape)
    return params


def _end_to_end(name, loss_and_grads, instances, seed, h=FD_STEP):
    """FD over the BN affine parameters for a full-network scalar loss."""
    rng = RandomStream(seed, f"gradcheck/{name}")
    worst = 0.0
    for _ in range(instances):
        params = _random_model(rng.split("model"))
        x = rng.standard_normal((8, params.arch.input_dim))
        value_fn, grads = loss_and_grads(params, x)
        for key in _bn_affine_keys(params):
            tensor = get_tensor(params, key)
            fd = np.zeros_like(tensor)
            for i in range(tensor.size):
                orig = tensor.ravel()[i]
                tensor.ravel()[i] = orig + h
                up = value_fn(params)
                tensor.ravel()[i] = orig - h
                down = value_fn(params)
                tensor.ravel()[i] = orig
                fd.ravel()[i] = (up - down) / (2.0 * h)
            worst = max(worst, rel_error(fd, grads[key]))
    return SuiteResult(name, worst, instances)


def check_end_to_end_entropy(instances=10, seed=0):
    def setup(params, x):
        cache = forward(params, x, "batch")
        ent = entropy_loss(cache.probs)
        grads = backward(params, cache,
                         grad_logits=softmax_backward(cache.probs, ent.grad))

        def value(p):
            return entropy_loss(forward(p, x, "batch").probs).value
        return value, grads
    return _end_to_end("end_to_end_entropy", setup, instances, seed)


def check_end_to_end_svp(instances=10, seed=0, alpha1=1.0, alpha2=0.3):
    def setup(params, x):
        cache = forward(params, x, "batch")
        res = svp_loss(cache.probs, alpha1, alpha2)
        grads = backward(params, cache,
                         grad_logits=softmax_backward(cache.probs, res.grad))

        def value(p):
            return svp_loss(forward(p, x, "batch").probs, alpha1, alpha2).value
        return value, grads
    return _end_to_end("end_to_end_svp", setup, instances, seed)


def check_end_to_end_sda(instances=10, seed=0, beta=0.4, t=2):
    """Augmentation draws are replayed from a fixed stream each evaluation, so
    the loss is a smooth function of the parameters."""
    def setup(params, x):
        cache = forward(params, x, "batch")
        pseudo = cache.probs.argmax(axis=1)
        stats = ClassStats.empty(params.arch.num_classes, params.arch.feature_dim)
        seed_rng = RandomStream(seed, "gradcheck/sda-stats")
        warm = seed_rng.standard_normal((40, params.arch.feature_dim))
        warm_labels = seed_rng.integers(0, params.arch.num_classes, shape=40)
        stats = merge_stats(stats, batch_moments(
            warm, warm_labels, params.arch.num_classes))

        def value(p):
            c = forward(p, x, "batch")
            aug = augment_features(c.features, pseudo, stats, beta, t, 1,
                                   RandomStream(seed, "gradcheck/sda-draws"))
            return sda_loss(aug, p.head_w, p.head_b).value

        aug = augment_features(cache.features, pseudo, stats, beta, t, 1,
                               RandomStream(seed, "gradcheck/sda-draws"))
        sda = sda_loss(aug, params.head_w, params.head_b)
        grad_f = np.zeros_like(cache.features)
        np.add.at(grad_f, aug.source_index, sda.grad_features)
        grads = backward(params, cache, grad_features=grad_f)
        return value, grads
    return _end_to_end("end_to_end_sda", setup, instances, seed)


def run_all(instances=50, end_to_end_instances=10, seed=0):
    """Every suite; returns a list of SuiteResult."""
    return [
        check_svd_sum(instances, seed),
        check_svd_var(instances, seed),
        check_svp(instances, seed),
        check_entropy(instances, seed),
        check_cross_entropy(instances, seed),
        check_sda(instances, seed),
        check_end_to_end_entropy(end_to_end_instances, seed),
        check_end_to_end_svp(end_to_end_instances, seed),
        check_end_to_end_sda(end_to_end_instances, seed),
    ]
