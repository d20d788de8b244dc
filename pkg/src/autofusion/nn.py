"""Fixed-architecture classifiers (MLP and small VGG-style CNN) in numpy.

Every layer weight has a *grouped* view ``(out, in_units, rest)``: ``in_units``
are the permutable units of the previous layer and ``rest`` the elements each
unit owns (1 for dense, ``k*k`` for conv, ``H*W`` for the first dense layer
after the conv stack). Permuting hidden unit ``l`` with ``M_l`` maps
``W_l -> M_l W_l M_{l-1}^T`` and ``b_l -> M_l b_l`` in that view; the input
and output (class) interfaces are never permuted.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import LabeledDataset, batches


class DimensionError(ValueError):
    pass


class TraceError(RuntimeError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "conv"
    out: int
    in_units: int
    rest: int

    @property
    def weight_shape(self):
        if self.kind == "conv":
            k = math.isqrt(self.rest)
            return (self.out, self.in_units, k, k)
        return (self.out, self.in_units * self.rest)


@dataclass(frozen=True)
class ArchDescriptor:
    """Network shape. ``hidden`` are the dense hidden widths; ``channels`` the
    conv output channels (CNN only). Each conv is 3x3/pad-1, ReLU, 2x2 max-pool."""
    kind: str = "mlp"
    input_shape: tuple = (1, 28, 28)
    hidden: tuple = (512,) * 6
    class_count: int = 10
    channels: tuple = ()
    kernel: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("mlp", "cnn"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.activation != "relu":
            raise ValueError("only relu activations are supported")
        if self.kind == "cnn":
            if not self.channels:
                raise ValueError("cnn needs at least one conv block")
            _, h, w = self.input_shape
            if h % 2 ** len(self.channels) or w % 2 ** len(self.channels):
                raise ValueError("input size not divisible by the pooling stack")
        elif self.channels:
            raise ValueError("mlp takes no conv channels")

    @classmethod
    def mlp(cls, hidden=(512,) * 6, class_count=10, input_shape=(1, 28, 28)):
        return cls("mlp", tuple(input_shape), tuple(hidden), class_count)

    @classmethod
    def cnn(cls, channels=(16, 32), hidden=(128,), class_count=10, input_shape=(1, 28, 28)):
        return cls("cnn", tuple(input_shape), tuple(hidden), class_count, tuple(channels))

    def layers(self) -> list[LayerSpec]:
        c, h, w = self.input_shape
        specs = []
        if self.kind == "mlp":
            dims = [c * h * w, *self.hidden, self.class_count]
            return [LayerSpec("dense", o, i, 1) for i, o in zip(dims[:-1], dims[1:])]
        prev = c
        for ch in self.channels:
            specs.append(LayerSpec("conv", ch, prev, self.kernel * self.kernel))
            prev, h, w = ch, h // 2, w // 2
        dims = [*self.hidden, self.class_count]
        specs.append(LayerSpec("dense", dims[0], prev, h * w))
        for i, o in zip(dims[:-1], dims[1:]):
            specs.append(LayerSpec("dense", o, i, 1))
        return specs

    def perm_sizes(self) -> list[int]:
        """Sizes of the permutable hidden interfaces (one per non-final layer)."""
        return [s.out for s in self.layers()[:-1]]


@dataclass
class ModelParams:
    weights: list
    biases: list
    arch: ArchDescriptor

    def __post_init__(self):
        specs = self.arch.layers()
        if len(specs) != len(self.weights) or len(specs) != len(self.biases):
            raise DimensionError("layer count does not match architecture")
        for s, w, b in zip(specs, self.weights, self.biases):
            if tuple(w.shape) != s.weight_shape or tuple(b.shape) != (s.out,):
                raise DimensionError(f"layer shape {w.shape} does not match {s.weight_shape}")

    @property
    def num_layers(self):
        return len(self.weights)

    def grouped(self, l):
        s = self.arch.layers()[l]
        return self.weights[l].reshape(s.out, s.in_units, s.rest)

    def astype(self, dtype):
        return ModelParams([w.astype(dtype) for w in self.weights],
                           [b.astype(dtype) for b in self.biases], self.arch)

    def copy(self):
        return self.astype(self.weights[0].dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    def allclose(self, other, atol=0.0):
        return all(np.allclose(a, b, rtol=0, atol=atol)
                   for a, b in zip(self.weights + self.biases, other.weights + other.biases))


@dataclass
class GradSet:
    weights: list
    biases: list


@dataclass
class ForwardTrace:
    params: ModelParams
    records: list
    logits_shape: tuple


def init_params(arch: ArchDescriptor, seed: int, dtype=np.float32) -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for s in arch.layers():
        fan_in = s.in_units * s.rest
        bound = math.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-bound, bound, size=s.weight_shape).astype(dtype))
        bs.append(np.zeros(s.out, dtype=dtype))
    return ModelParams(ws, bs, arch)


def _prep_inputs(arch, x):
    x = np.asarray(x)
    c, h, w = arch.input_shape
    n = x.shape[0]
    if x.size != n * c * h * w:
        raise DimensionError(f"input of shape {x.shape} does not match {arch.input_shape}")
    if arch.kind == "mlp":
        return x.reshape(n, c * h * w)
    return x.reshape(n, c, h, w)


def _im2col(x, k):
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _col2im(dcols, shape, k):
    n, c, h, w = shape
    p = k // 2
    d = dcols.reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + w]


def _maxpool(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(-1)
    return np.take_along_axis(blocks, idx[..., None], -1)[..., 0], idx


def _maxpool_backward(dy, idx, shape):
    n, c, h, w = shape
    d = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(d, idx[..., None], dy[..., None], -1)
    d = d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return d.reshape(shape)


def forward(params: ModelParams, inputs, keep_trace=True):
    """Logits for a batch, plus the trace needed by :func:`backward_params`."""
    arch = params.arch
    specs = arch.layers()
    a = _prep_inputs(arch, inputs).astype(params.weights[0].dtype, copy=False)
    records = []
    last = len(specs) - 1
    for l, (s, w, b) in enumerate(zip(specs, params.weights, params.biases)):
        if s.kind == "conv":
            k = arch.kernel
            n, _, h, wd = a.shape
            cols = _im2col(a, k)
            z = (cols @ w.reshape(s.out, -1).T + b).reshape(n, h, wd, s.out).transpose(0, 3, 1, 2)
            r = np.maximum(z, 0)
            pooled, idx = _maxpool(r)
            records.append(("conv", a.shape, cols if keep_trace else None, z > 0, idx, r.shape))
            a = pooled
        else:
            if a.ndim > 2:
                a = a.reshape(a.shape[0], -1)
            z = a @ w.T + b
            records.append(("dense", a if keep_trace else None, z > 0 if l < last else None))
            a = np.maximum(z, 0) if l < last else z
    return a, ForwardTrace(params, records, a.shape)


def predict(params, inputs, batch_size=2000):
    out = [forward(params, inputs[i:i + batch_size], keep_trace=False)[0]
           for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.arch.class_count))


def log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def _as_target_rows(logits, targets):
    targets = np.asarray(targets)
    if targets.ndim == 1:
        rows = np.zeros_like(logits)
        rows[np.arange(len(targets)), targets] = 1.0
        return rows
    if targets.shape != logits.shape:
        raise DimensionError(f"targets {targets.shape} vs logits {logits.shape}")
    return targets


def cross_entropy(logits, targets, return_grad=False):
    """Mean cross-entropy against class indices or probability rows.

    With ``return_grad`` also returns d(loss)/d(logits).
    """
    logits = np.asarray(logits)
    rows = _as_target_rows(logits, targets)
    n = max(len(logits), 1)
    lsm = log_softmax(logits)
    loss = float(-(rows * lsm).sum() / n)
    if not return_grad:
        return loss
    grad = (np.exp(lsm) * rows.sum(axis=1, keepdims=True) - rows) / n
    return loss, grad


def backward_params(trace: ForwardTrace, dlogits, params: ModelParams | None = None) -> GradSet:
    """Reverse-mode gradients of a scalar loss w.r.t. every weight and bias."""
    if params is not None and params is not trace.params:
        raise TraceError("trace was recorded for different parameters")
    if tuple(np.shape(dlogits)) != tuple(trace.logits_shape):
        raise TraceError(f"gradient seed {np.shape(dlogits)} does not match logits {trace.logits_shape}")
    p = trace.params
    specs = p.arch.layers()
    if len(trace.records) != len(specs):
        raise TraceError("trace layer count does not match model")
    gw, gb = [None] * len(specs), [None] * len(specs)
    g = np.asarray(dlogits, dtype=p.weights[0].dtype)
    for l in range(len(specs) - 1, -1, -1):
        rec = trace.records[l]
        w = p.weights[l]
        if rec[0] == "dense":
            _, a, mask = rec
            if a is None:
                raise TraceError("trace recorded without activations")
            if mask is not None:
                g = g * mask
            gw[l] = g.T @ a
            gb[l] = g.sum(axis=0)
            if l > 0:
                g = g @ w
                prev = trace.records[l - 1]
                if prev[0] == "conv":
                    n = g.shape[0]
                    g = g.reshape(n, specs[l - 1].out, *[d // 2 for d in prev[5][2:]])
        else:
            _, in_shape, cols, mask, idx, r_shape = rec
            if cols is None:
                raise TraceError("trace recorded without activations")
            g = _maxpool_backward(g, idx, r_shape) * mask
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, specs[l].out)
            gw[l] = (g2.T @ cols).reshape(w.shape)
            gb[l] = g2.sum(axis=0)
            if l > 0:
                g = _col2im(g2 @ w.reshape(specs[l].out, -1), in_shape, p.arch.kernel)
    return GradSet(gw, gb)


@dataclass
class TrainSchedule:
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 64
    momentum: float = 0.0
    dtype: str = "float32"


def train_base(ds: LabeledDataset, arch: ArchDescriptor, schedule: TrainSchedule | None = None,
               seed: int = 0, history: list | None = None) -> ModelParams:
    """Mini-batch gradient descent on cross-entropy from a seeded init.

    Labels must already be in the model's output indexing. Per-epoch mean
    loss and train accuracy are appended to ``history`` if given.
    """
    schedule = schedule or TrainSchedule()
    if len(ds) and ds.labels.max() >= arch.class_count:
        raise ValueError("dataset labels exceed the model's class count")
    params = init_params(arch, seed, np.dtype(schedule.dtype))
    velocity = [np.zeros_like(t) for t in params.weights + params.biases]
    for epoch in range(schedule.epochs):
        total, correct, seen = 0.0, 0, 0
        for x, y in batches(ds, schedule.batch_size, seed=seed * 100003 + epoch, shuffle=True):
            logits, trace = forward(params, x)
            loss, dlogits = cross_entropy(logits, y, return_grad=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}")
            grads = backward_params(trace, dlogits)
            tensors = params.weights + params.biases
            for i, (t, g) in enumerate(zip(tensors, grads.weights + grads.biases)):
                if schedule.momentum:
                    velocity[i] = schedule.momentum * velocity[i] + g
                    g = velocity[i]
                t -= schedule.lr * g.astype(t.dtype, copy=False)
            total += loss * len(y)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(y)
        if not all(np.all(np.isfinite(t)) for t in params.weights + params.biases):
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch}")
        if history is not None:
            history.append({"epoch": epoch, "loss": total / max(seen, 1),
                            "train_acc": 100.0 * correct / max(seen, 1)})
    return params


# --- permutation algebra ----------------------------------------------------

def _permute_grouped(wg, m_out, m_in):
    o, i, r = wg.shape
    if m_out is not None:
        wg = (m_out @ wg.reshape(o, i * r)).reshape(m_out.shape[0], i, r)
    if m_in is not None:
        o = wg.shape[0]
        if r == 1:
            wg = (wg[:, :, 0] @ m_in.T)[:, :, None]
        else:
            wg = (wg.transpose(0, 2, 1) @ m_in.T).transpose(0, 2, 1)
    return wg


def permute_params(params: ModelParams, mats: Sequence) -> ModelParams:
    """Apply per-interface matrices: ``W_l -> M_l W_l M_{l-1}^T``, ``b_l -> M_l b_l``.

    ``mats`` has one (soft or hard) square matrix per permutable interface.
    """
    specs = params.arch.layers()
    if len(mats) != len(specs) - 1:
        raise DimensionError(f"need {len(specs) - 1} permutation matrices, got {len(mats)}")
    for m, n in zip(mats, params.arch.perm_sizes()):
        if np.shape(m) != (n, n):
            raise DimensionError(f"permutation of shape {np.shape(m)} for width {n}")
    ws, bs = [], []
    for l, s in enumerate(specs):
        m_out = mats[l] if l < len(mats) else None
        m_in = mats[l - 1] if l > 0 else None
        wg = _permute_grouped(params.grouped(l), m_out, m_in)
        ws.append(wg.reshape(s.weight_shape))
        bs.append(m_out @ params.biases[l] if m_out is not None else params.biases[l].copy())
    return ModelParams(ws, bs, params.arch)


def assignment_matrices(assignments, dtype=np.float64):
    """Dense 0/1 matrices ``P[i, a[i]] = 1`` from assignment vectors."""
    mats = []
    for a in assignments:
        a = np.asarray(a)
        p = np.zeros((len(a), len(a)), dtype=dtype)
        p[np.arange(len(a)), a] = 1
        mats.append(p)
    return mats


def permuted_grads(params_b: ModelParams, mats: Sequence, dweights: Sequence,
                   dbiases: Sequence) -> list:
    """Gradients w.r.t. ``mats`` given gradients w.r.t. ``permute_params(params_b, mats)``.

    Entries of ``dweights``/``dbiases`` may be None for layers with no gradient.
    """
    specs = params_b.arch.layers()
    out = [np.zeros_like(m, dtype=np.result_type(m, params_b.weights[0])) for m in mats]
    for l, s in enumerate(specs):
        gw, gb = dweights[l], dbiases[l]
        m_out = mats[l] if l < len(mats) else None
        m_in = mats[l - 1] if l > 0 else None
        wb = params_b.grouped(l)
        if gw is not None:
            g = np.asarray(gw).reshape(s.out, s.in_units, s.rest)
            if m_out is not None:
                t_in = _permute_grouped(wb, None, m_in)
                out[l] += g.reshape(s.out, -1) @ t_in.reshape(s.out, -1).T
            if m_in is not None:
                t_out = _permute_grouped(wb, m_out, None)
                if s.rest == 1:
                    out[l - 1] += g[:, :, 0].T @ t_out[:, :, 0]
                else:
                    gi = g.transpose(1, 0, 2).reshape(s.in_units, -1)
                    ti = t_out.transpose(1, 0, 2).reshape(s.in_units, -1)
                    out[l - 1] += gi @ ti.T
        if gb is not None and m_out is not None:
            out[l] += np.outer(gb, params_b.biases[l])
    return out


def interpolate(theta_a: ModelParams, theta_b: ModelParams, gamma: float) -> ModelParams:
    if theta_a.arch != theta_b.arch:
        raise DimensionError("architectures differ")
    return ModelParams([gamma * a + (1 - gamma) * b for a, b in zip(theta_a.weights, theta_b.weights)],
                       [gamma * a + (1 - gamma) * b for a, b in zip(theta_a.biases, theta_b.biases)],
                       theta_a.arch)


@dataclass
class FusedTrace:
    theta_b: ModelParams
    gamma: float
    mats: list
    perm_state: object
    trace: ForwardTrace
    merged: ModelParams = field(repr=False, default=None)


def _soft_mats(perms, record):
    if hasattr(perms, "soft_matrices"):
        return perms.soft_matrices(record=record)
    return [np.asarray(m) for m in perms], None


def forward_fused(theta_a: ModelParams, theta_b: ModelParams, perms, gamma: float, inputs,
                  permuted_b: ModelParams | None = None):
    """Logits of ``gamma * A + (1 - gamma) * perm(B)`` with a trace for :func:`backward_fused`.

    ``perms`` is either a sequence of matrices or an object exposing
    ``soft_matrices(record)`` / ``backward(dmats, state)`` (a PermutationSet);
    in the latter case :func:`backward_fused` returns logit gradients.
    """
    if theta_a.arch != theta_b.arch:
        raise DimensionError("architectures differ")
    mats, state = _soft_mats(perms, record=True)
    pb = permuted_b if permuted_b is not None else permute_params(theta_b, mats)
    merged = interpolate(theta_a, pb, gamma)
    logits, trace = forward(merged, inputs)
    return logits, FusedTrace(theta_b, gamma, mats, (perms, state), trace, merged)


def backward_fused(ftrace: FusedTrace, dlogits) -> list:
    """Gradients w.r.t. the permutation logits (or matrices); model weights get none."""
    if not isinstance(ftrace, FusedTrace):
        raise TraceError("expected a trace from forward_fused")
    grads = backward_params(ftrace.trace, dlogits)
    c = 1.0 - ftrace.gamma
    dmats = permuted_grads(ftrace.theta_b, ftrace.mats, [c * g for g in grads.weights],
                           [c * g for g in grads.biases])
    perms, state = ftrace.perm_state
    if state is not None:
        return perms.backward(dmats, state)
    return dmats
