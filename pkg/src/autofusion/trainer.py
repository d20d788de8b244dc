"""Learning permutation logits from alignment and pseudo-label retention losses."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import LabeledDataset, SamplePool
from .evaluate import evaluate_tasks
from .fusion import PermutationSet, merge_autofusion
from .nn import (ModelParams, backward_params, cross_entropy, forward, interpolate,
                 permute_params, permuted_grads, predict, softmax)

EPS = 1e-8
STRATEGIES = ("weighted", "rounded", "normalized")
LAYER_RULES = ("inverse", "linear", "uniform")


class FusionDivergedError(FloatingPointError):
    def __init__(self, epoch, what="loss"):
        super().__init__(f"non-finite {what} in epoch {epoch}")
        self.epoch = epoch


@dataclass
class FusionConfig:
    tau: float = 1.0
    t: int = 20
    zeta: float = 0.9
    w_align: float = 0.4
    w_retain: float = 0.6
    strategy: str = "normalized"
    round_period: int = 1
    lr_start: float = 1.0
    lr_end: float = 0.01
    epochs: int = 64
    pool_size: int = 2000
    batch: int = 500
    seed: int = 0
    layer_weight_rule: str = "inverse"
    init_scale: float = 10.0
    labeled: bool = False
    gamma: float = 0.5
    mode: str = "soft"
    optimizer: str = "adam"
    momentum: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError("zeta must lie in [0, 1]")
        if self.w_align < 0 or self.w_retain < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 0 or self.t < 0:
            raise ValueError("epochs and t must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.layer_weight_rule not in LAYER_RULES:
            raise ValueError(f"layer_weight_rule must be one of {LAYER_RULES}")
        if self.batch < 1 or self.round_period < 1:
            raise ValueError("batch and round_period must be >= 1")
        if self.mode not in ("soft", "hard"):
            raise ValueError("mode must be soft or hard")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "FusionConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


def layer_weights(num_layers: int, rule: str = "inverse") -> np.ndarray:
    """Per-layer alignment weights, layers counted from 1.

    ``inverse``: 2L/l (shallow layers weigh most); ``linear``: 2(L-l)/L;
    ``uniform``: 1.
    """
    l = np.arange(1, num_layers + 1, dtype=np.float64)
    L = float(num_layers)
    if rule == "inverse":
        return 2 * L / l
    if rule == "linear":
        return 2 * (L - l) / L
    if rule == "uniform":
        return np.ones(num_layers)
    raise ValueError(f"unknown layer weight rule {rule!r}")


class _Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.k = 0

    def steps(self, grads, lr):
        self.k += 1
        c1 = 1 - self.beta1 ** self.k
        c2 = 1 - self.beta2 ** self.k
        for m, v, g in zip(self.m, self.v, grads):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            yield lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _SGD:
    def __init__(self, shapes, momentum=0.0):
        self.buf = [np.zeros(s) for s in shapes]
        self.momentum = momentum

    def steps(self, grads, lr):
        for b, g in zip(self.buf, grads):
            if self.momentum:
                b *= self.momentum
                b += g
                g = b
            yield lr * g


def cosine_lr(epoch: int, epochs: int, lr_start: float, lr_end: float) -> float:
    if epochs <= 0:
        return lr_start
    return lr_end + 0.5 * (lr_start - lr_end) * (1 + math.cos(math.pi * epoch / epochs))


@dataclass
class PseudoLabelSet:
    probs: np.ndarray
    confidence: np.ndarray
    retained: np.ndarray
    source: np.ndarray  # 0 -> model A, 1 -> model B

    def __len__(self):
        return len(self.probs)

    @property
    def retained_count(self):
        return int(self.retained.sum())


def pseudo_labels_from_probs(pa, pb, zeta):
    ca, cb = pa.max(axis=1), pb.max(axis=1)
    take_b = cb > ca
    probs = np.where(take_b[:, None], pb, pa)
    conf = probs.max(axis=1)
    return PseudoLabelSet(probs, conf, conf > zeta, take_b.astype(np.int64))


def make_pseudo_labels(theta_a: ModelParams, theta_b: ModelParams, pool, zeta: float) -> PseudoLabelSet:
    """Softmax row of whichever model is more confident per sample (ties: A)."""
    images = pool.images if isinstance(pool, (SamplePool, LabeledDataset)) else np.asarray(pool)
    pa = softmax(predict(theta_a.astype(np.float64), images))
    pb = softmax(predict(theta_b.astype(np.float64), images))
    return pseudo_labels_from_probs(pa, pb, zeta)


def _align(theta_a, theta_b, mats, permuted_b, weights):
    """Alignment loss and its gradient w.r.t. the soft matrices."""
    L = theta_a.num_layers
    loss = 0.0
    dws, dbs = [], []
    for l in range(L):
        rw = theta_a.weights[l] - permuted_b.weights[l]
        rb = theta_a.biases[l] - permuted_b.biases[l]
        loss += weights[l] * (float((rw * rw).sum()) + float((rb * rb).sum()))
        dws.append(-2.0 * weights[l] / L * rw)
        dbs.append(-2.0 * weights[l] / L * rb)
    return loss / L, permuted_grads(theta_b, mats, dws, dbs)


def _retain(theta_a, theta_b, mats, permuted_b, x, targets, gamma):
    """Soft-target cross-entropy of the gamma-fused model, gradient w.r.t. matrices."""
    if len(x) == 0:
        return 0.0, [np.zeros_like(m) for m in mats]
    merged = interpolate(theta_a, permuted_b, gamma)
    logits, trace = forward(merged, x)
    loss, dlogits = cross_entropy(logits, targets, return_grad=True)
    grads = backward_params(trace, dlogits)
    c = 1.0 - gamma
    return loss, permuted_grads(theta_b, mats, [c * g for g in grads.weights],
                                [c * g for g in grads.biases])


def align_loss(theta_a: ModelParams, theta_b: ModelParams, perms: PermutationSet,
               weights=None):
    """Layer-weighted squared distance between A and soft-permuted B.

    Returns ``(loss, gradients w.r.t. each logit matrix)``; biases count
    under the same layer weight.
    """
    a64, b64 = theta_a.astype(np.float64), theta_b.astype(np.float64)
    if weights is None:
        weights = layer_weights(a64.num_layers)
    mats, traces = perms.soft_matrices(record=True)
    pb = permute_params(b64, mats)
    loss, dmats = _align(a64, b64, mats, pb, weights)
    return loss, perms.backward(dmats, traces)


def retain_loss(theta_a: ModelParams, theta_b: ModelParams, perms: PermutationSet, x,
                pseudo: PseudoLabelSet, gamma: float):
    """Mean cross-entropy of the fused model against retained pseudo-labels.

    ``pseudo`` is aligned row-by-row with ``x``. Zero loss and zero gradient
    when nothing is retained.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    a64, b64 = theta_a.astype(np.float64), theta_b.astype(np.float64)
    keep = pseudo.retained
    mats, traces = perms.soft_matrices(record=True)
    if not keep.any():
        return 0.0, [np.zeros_like(x) for x in perms.logits]
    pb = permute_params(b64, mats)
    loss, dmats = _retain(a64, b64, mats, pb, np.asarray(x)[keep], pseudo.probs[keep], gamma)
    return loss, perms.backward(dmats, traces)


def combine_losses(l_align: float, l_retain: float, strategy: str, config: FusionConfig,
                   epoch: int = 0):
    """Total loss and the effective ``(w_align, w_retain)`` for this step.

    ``normalized`` divides each loss by its own detached magnitude; a zero
    configured weight switches that term off.
    """
    if strategy == "weighted":
        wa, wr = config.w_align, config.w_retain
    elif strategy == "rounded":
        wa, wr = (1.0, 0.0) if (epoch // config.round_period) % 2 == 0 else (0.0, 1.0)
    elif strategy == "normalized":
        wa = 1.0 / (abs(l_align) + EPS) if config.w_align > 0 else 0.0
        wr = 1.0 / (abs(l_retain) + EPS) if config.w_retain > 0 else 0.0
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return wa * l_align + wr * l_retain, (wa, wr)


def train_permutations(theta_a: ModelParams, theta_b: ModelParams, pool, config: FusionConfig,
                       val_tasks=None, pool_labels=None, init: PermutationSet | None = None):
    """Gradient descent on the permutation logits; model weights stay frozen.

    ``pool`` is a SamplePool (or image array). With ``config.labeled`` the
    true ``pool_labels`` replace pseudo-labels (all samples retained).
    ``val_tasks`` (global-label datasets) adds per-epoch validation accuracy
    of the ``config.gamma`` soft merge to the log.
    Returns ``(PermutationSet, log)``; the log holds one dict per epoch.
    """
    a64, b64 = theta_a.astype(np.float64), theta_b.astype(np.float64)
    L = a64.num_layers
    weights = layer_weights(L, config.layer_weight_rule)
    perms = init.copy() if init is not None else PermutationSet.near_identity(
        a64.arch.perm_sizes(), config.init_scale, config.tau, config.t)
    images = pool.images if isinstance(pool, (SamplePool, LabeledDataset)) else np.asarray(pool)
    if config.labeled:
        if pool_labels is None:
            raise ValueError("labeled mode needs pool labels")
        probs = np.eye(a64.arch.class_count)[np.asarray(pool_labels)]
        pseudo = PseudoLabelSet(probs, np.ones(len(probs)), np.ones(len(probs), bool),
                                np.zeros(len(probs), np.int64))
    else:
        pseudo = make_pseudo_labels(a64, b64, images, config.zeta)
    if config.w_retain > 0 and len(images) == 0 and config.epochs > 0:
        raise ValueError("retention loss needs a non-empty sample pool")

    rng = np.random.default_rng(config.seed)
    shapes = [x.shape for x in perms.logits]
    opt = _Adam(shapes) if config.optimizer == "adam" else _SGD(shapes, config.momentum)
    log = []
    n = len(images)
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr_start, config.lr_end)
        order = rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        retained_total = 0
        for start in range(0, max(n, 1), config.batch):
            idx = order[start:start + config.batch]
            gamma_t = float(rng.uniform(0.0, 1.0))
            mats, traces = perms.soft_matrices(record=True)
            pb = permute_params(b64, mats)
            la, da = _align(a64, b64, mats, pb, weights)
            keep = idx[pseudo.retained[idx]]
            lr_loss, dr = _retain(a64, b64, mats, pb, images[keep], pseudo.probs[keep], gamma_t)
            total, (wa, wr) = combine_losses(la, lr_loss, config.strategy, config, epoch)
            if not (np.isfinite(total) and np.isfinite(la) and np.isfinite(lr_loss)):
                raise FusionDivergedError(epoch)
            dmats = [wa * ga + wr * gr for ga, gr in zip(da, dr)]
            dx = perms.backward(dmats, traces)
            if not all(np.all(np.isfinite(g)) for g in dx):
                raise FusionDivergedError(epoch, "gradient")
            for x, step in zip(perms.logits, opt.steps(dx, lr)):
                x -= step
            sums += (la, lr_loss, total)
            steps += 1
            retained_total += len(keep)
        entry = {"epoch": epoch, "loss_align": sums[0] / steps, "loss_retain": sums[1] / steps,
                 "loss_total": sums[2] / steps, "lr": lr, "retained_count": retained_total}
        if val_tasks:
            fused = merge_autofusion(a64, b64, config.gamma, perms, "soft")
            entry["val_joint"] = evaluate_tasks(fused, val_tasks)[0]
        log.append(entry)
    return perms, log


def write_training_log(path, log):
    cols = ["epoch", "loss_align", "loss_retain", "loss_total", "lr", "retained_count"]
    extra = sorted({k for e in log for k in e} - set(cols))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + extra)
        for e in log:
            row = [e["epoch"], f"{e['loss_align']:.6f}", f"{e['loss_retain']:.6f}",
                   f"{e['loss_total']:.6f}", f"{e['lr']:.6f}", e["retained_count"]]
            row += [f"{e[k]:.6f}" if k in e else "" for k in extra]
            w.writerow(row)
