"""Fully-connected classifier with batch normalization.

Forward/backward are hand-derived for this fixed architecture: a stack of
linear + BN + ReLU layers producing the deep features, then a linear head.
Only the tensors named by ``adapt_set`` receive gradients; the chain rule
always flows through the whole network.
"""

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataFormatError, TrainingDivergenceError
from .linalg import as_labels, as_matrix
from .losses import cross_entropy_loss

BN_EPS = 1e-5
ADAPT_SETS = ("bn_affine", "bn_affine_plus_head", "all")

CHECKPOINT_MAGIC = b"SVPM"
CHECKPOINT_VERSION = 1


@dataclass
class Architecture:
    input_dim: int
    hidden: tuple  # widths of the hidden layers; the last one is the feature dim
    num_classes: int

    @property
    def feature_dim(self):
        return self.hidden[-1]

    def validate(self):
        if self.input_dim < 1 or self.num_classes < 2 or len(self.hidden) < 1:
            raise ContractViolation(f"invalid architecture {self}")
        if any(w < 1 for w in self.hidden):
            raise ContractViolation("hidden widths must be positive")


@dataclass
class LayerParams:
    w: np.ndarray         # (fan_in, width)
    b: np.ndarray         # (width,)
    gamma: np.ndarray     # (width,)
    beta: np.ndarray      # (width,)
    run_mean: np.ndarray  # (width,)
    run_var: np.ndarray   # (width,)

    def copy(self):
        return LayerParams(*(t.copy() for t in (
            self.w, self.b, self.gamma, self.beta, self.run_mean, self.run_var)))


@dataclass
class ModelParams:
    arch: Architecture
    layers: list
    head_w: np.ndarray  # (num_classes, feature_dim)
    head_b: np.ndarray  # (num_classes,)

    def copy(self):
        return ModelParams(
            arch=self.arch,
            layers=[lp.copy() for lp in self.layers],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )


def init_params(arch, rng):
    """He-initialized weights, identity BN affine, unit running variance."""
    arch.validate()
    layers = []
    fan = arch.input_dim
    for width in arch.hidden:
        layers.append(LayerParams(
            w=rng.standard_normal((fan, width)) * np.sqrt(2.0 / fan),
            b=np.zeros(width),
            gamma=np.ones(width),
            beta=np.zeros(width),
            run_mean=np.zeros(width),
            run_var=np.ones(width),
        ))
        fan = width
    head_w = rng.standard_normal((arch.num_classes, arch.feature_dim))
    head_w *= np.sqrt(1.0 / arch.feature_dim)
    return ModelParams(arch=arch, layers=layers, head_w=head_w,
                       head_b=np.zeros(arch.num_classes))


@dataclass
class LayerCache:
    x: np.ndarray        # layer input
    mean: np.ndarray     # normalization mean actually used
    var: np.ndarray      # normalization variance actually used
    inv_std: np.ndarray
    xhat: np.ndarray     # normalized pre-activations
    pre: np.ndarray      # post-affine, pre-ReLU
    act: np.ndarray


@dataclass
class ForwardCache:
    bn_mode: str
    layers: list
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def forward(params, inputs, bn_mode):
    """Run the network; bn_mode 'batch' uses current-batch statistics,
    'running' the stored ones."""
    x = as_matrix(inputs, "inputs")
    if bn_mode not in ("batch", "running"):
        raise ContractViolation(f"bn_mode must be 'batch' or 'running', got {bn_mode!r}")
    if x.shape[1] != params.arch.input_dim:
        raise ContractViolation(
            f"input dim {x.shape[1]} != architecture dim {params.arch.input_dim}"
        )
    if bn_mode == "batch" and x.shape[0] < 2:
        raise ContractViolation("batch BN needs at least 2 rows")

    caches = []
    h = x
    for lp in params.layers:
        z = h @ lp.w + lp.b
        if bn_mode == "batch":
            mean = z.mean(axis=0)
            var = z.var(axis=0)
        else:
            mean = lp.run_mean
            var = lp.run_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mean) * inv_std
        pre = lp.gamma * xhat + lp.beta
        act = np.maximum(pre, 0.0)
        caches.append(LayerCache(x=h, mean=mean, var=var, inv_std=inv_std,
                                 xhat=xhat, pre=pre, act=act))
        h = act

    logits = h @ params.head_w.T + params.head_b
    # inline softmax: unlike softmax_rows this must tolerate non-finite
    # logits so that training can detect divergence instead of crashing
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return ForwardCache(bn_mode=bn_mode, layers=caches, features=h,
                        logits=logits, probs=probs)


def backward(params, cache, grad_logits=None, grad_features=None,
             adapt_set="bn_affine"):
    """Backpropagate to the tensors in ``adapt_set``.

    The gradient may be seeded at the logits, at the deep features (the
    augmentation loss enters there), or both; contributions add.  Returns a
    dict keyed like 'layers.0.gamma' / 'head.w'.
    """
    if adapt_set not in ADAPT_SETS:
        raise ContractViolation(f"unknown adapt_set {adapt_set!r}")
    if grad_logits is None and grad_features is None:
        raise ContractViolation("need grad_logits and/or grad_features")

    grads = {}
    g = np.zeros_like(cache.features)
    if grad_logits is not None:
        if grad_logits.shape != cache.logits.shape:
            raise ContractViolation("grad_logits shape mismatch")
        g += grad_logits @ params.head_w
        if adapt_set != "bn_affine":
            grads["head.w"] = grad_logits.T @ cache.features
            grads["head.b"] = grad_logits.sum(axis=0)
    if grad_features is not None:
        if grad_features.shape != cache.features.shape:
            raise ContractViolation("grad_features shape mismatch")
        g = g + grad_features

    batch_mode = cache.bn_mode == "batch"
    for idx in range(len(params.layers) - 1, -1, -1):
        lp = params.layers[idx]
        lc = cache.layers[idx]
        g_pre = g * (lc.pre > 0.0)
        grads[f"layers.{idx}.gamma"] = (g_pre * lc.xhat).sum(axis=0)
        grads[f"layers.{idx}.beta"] = g_pre.sum(axis=0)
        g_hat = g_pre * lp.gamma
        if batch_mode:
            # batch statistics depend on every row; subtract the mean terms
            g_z = lc.inv_std * (
                g_hat
                - g_hat.mean(axis=0)
                - lc.xhat * (g_hat * lc.xhat).mean(axis=0)
            )
        else:
            g_z = g_hat * lc.inv_std
        if adapt_set == "all":
            grads[f"layers.{idx}.w"] = lc.x.T @ g_z
            grads[f"layers.{idx}.b"] = g_z.sum(axis=0)
        g = g_z @ lp.w.T
    return grads


def get_tensor(params, key):
    if key == "head.w":
        return params.head_w
    if key == "head.b":
        return params.head_b
    _, idx, name = key.split(".")
    return getattr(params.layers[int(idx)], name)


def set_tensor(params, key, value):
    if key == "head.w":
        params.head_w = value
    elif key == "head.b":
        params.head_b = value
    else:
        _, idx, name = key.split(".")
        setattr(params.layers[int(idx)], name, value)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            step=self.step,
            m={k: t.copy() for k, t in self.m.items()},
            v={k: t.copy() for k, t in self.v.items()},
        )


def adam_step(state, params, grads):
    """One bias-corrected Adam update over the tensors present in ``grads``.

    Functional: returns (new_params, new_state); weight decay is zero.
    """
    new_params = params.copy()
    new_state = state.copy()
    new_state.step += 1
    t = new_state.step
    for key in sorted(grads):
        g = grads[key]
        m = new_state.m.get(key)
        v = new_state.v.get(key)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_state.m[key] = m
        new_state.v[key] = v
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        tensor = get_tensor(new_params, key).copy()
        tensor -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        set_tensor(new_params, key, tensor)
    return new_params, new_state


@dataclass
class TrainConfig:
    hidden: tuple = (64, 64, 32)
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    val_fraction: float = 0.2
    bn_momentum: float = 0.1


@dataclass
class TrainReport:
    val_error: float
    final_loss: float
    epochs_run: int
    val_size: int


def init_and_train_source(features, labels, num_classes, config, rng):
    """Train a source model on labeled data; returns (params, report).

    Deterministic in the rng seed.  Raises if the training loss goes
    non-finite.
    """
    x = as_matrix(features, "features")
    y = as_labels(labels, num_classes)
    if y.shape[0] != x.shape[0]:
        raise ContractViolation("features/labels length mismatch")

    arch = Architecture(input_dim=x.shape[1], hidden=tuple(config.hidden),
                        num_classes=num_classes)
    params = init_params(arch, rng.split("init"))

    n = x.shape[0]
    perm = rng.split("valsplit").permutation(n)
    n_val = int(round(config.val_fraction * n))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_train, y_train = x[train_idx], y[train_idx]

    opt = AdamState(lr=config.lr)
    shuffle = rng.split("shuffle")
    mom = config.bn_momentum
    last_loss = float("nan")
    for epoch in range(config.epochs):
        order = shuffle.permutation(len(x_train))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(x_train), config.batch_size):
            idx = order[start:start + config.batch_size]
            if idx.shape[0] < 2:
                continue
            cache = forward(params, x_train[idx], "batch")
            if not np.isfinite(cache.logits).all():
                raise TrainingDivergenceError(epoch=epoch)
            for lp, lc in zip(params.layers, cache.layers):
                lp.run_mean = (1.0 - mom) * lp.run_mean + mom * lc.mean
                lp.run_var = (1.0 - mom) * lp.run_var + mom * lc.var
            ce = cross_entropy_loss(cache.logits, y_train[idx])
            grads = backward(params, cache, grad_logits=ce.grad, adapt_set="all")
            params, opt = adam_step(opt, params, grads)
            epoch_loss += ce.value
            batches += 1
        last_loss = epoch_loss / max(batches, 1)
        if not np.isfinite(last_loss):
            raise TrainingDivergenceError(epoch=epoch)

    if n_val:
        val_cache = forward(params, x[val_idx], "running")
        preds = val_cache.probs.argmax(axis=1)
        val_error = float((preds != y[val_idx]).mean())
    else:
        val_error = float("nan")
    return params, TrainReport(val_error=val_error, final_loss=last_loss,
                               epochs_run=config.epochs, val_size=int(n_val))


def _atomic_write(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_params(params, path):
    """Little-endian binary checkpoint: magic, version, architecture, tensors."""
    arch = params.arch
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<IIi", CHECKPOINT_VERSION, arch.input_dim, len(arch.hidden))
    out += struct.pack(f"<{len(arch.hidden)}I", *arch.hidden)
    out += struct.pack("<I", arch.num_classes)
    for lp in params.layers:
        for tensor in (lp.w, lp.b, lp.gamma, lp.beta, lp.run_mean, lp.run_var):
            out += np.ascontiguousarray(tensor, dtype="<f8").tobytes()
    out += np.ascontiguousarray(params.head_w, dtype="<f8").tobytes()
    out += np.ascontiguousarray(params.head_b, dtype="<f8").tobytes()
    _atomic_write(path, bytes(out))


def _take(buf, offset, count, what):
    end = offset + count
    if end > len(buf):
        raise DataFormatError(f"truncated checkpoint while reading {what}", offset=offset)
    return buf[offset:end], end


def load_params(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    off = 0
    magic, off = _take(buf, off, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}", offset=0)
    header, off = _take(buf, off, 12, "header")
    version, input_dim, n_hidden = struct.unpack("<IIi", header)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    if n_hidden < 1 or n_hidden > 64:
        raise DataFormatError(f"implausible hidden layer count {n_hidden}", offset=12)
    widths_raw, off = _take(buf, off, 4 * n_hidden, "hidden widths")
    hidden = struct.unpack(f"<{n_hidden}I", widths_raw)
    nc_raw, off = _take(buf, off, 4, "class count")
    (num_classes,) = struct.unpack("<I", nc_raw)
    arch = Architecture(input_dim=input_dim, hidden=tuple(hidden),
                        num_classes=num_classes)
    arch.validate()

    def read_array(shape, what):
        nonlocal off
        count = int(np.prod(shape)) * 8
        raw, off = _take(buf, off, count, what)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    layers = []
    fan = arch.input_dim
    for i, width in enumerate(arch.hidden):
        lp = LayerParams(
            w=read_array((fan, width), f"layer {i} weights"),
            b=read_array((width,), f"layer {i} bias"),
            gamma=read_array((width,), f"layer {i} gamma"),
            beta=read_array((width,), f"layer {i} beta"),
            run_mean=read_array((width,), f"layer {i} running mean"),
            run_var=read_array((width,), f"layer {i} running var"),
        )
        if (lp.run_var <= 0).any():
            raise DataFormatError(
                f"layer {i} running variance must be positive", offset=off)
        layers.append(lp)
        fan = width
    head_w = read_array((num_classes, arch.feature_dim), "head weights")
    head_b = read_array((num_classes,), "head bias")
    if off != len(buf):
        raise DataFormatError(
            f"{len(buf) - off} trailing bytes after checkpoint payload", offset=off)
    return ModelParams(arch=arch, layers=layers, head_w=head_w, head_b=head_b)
