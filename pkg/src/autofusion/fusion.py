"""Materializing fused models: interpolation, re-basin and learned permutations."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LabeledDataset
from .evaluate import evaluate_tasks
from .nn import DimensionError, ModelParams, assignment_matrices, interpolate, permute_params
from .sinkhorn import HardPermutation, project_hard, sinkhorn_backward, sinkhorn_soft


class ModeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class PermutationSet:
    """One permutation per hidden interface; input and output stay identity.

    Holds trainable logits (soft mode) and/or fixed assignments (hard mode).
    """

    def __init__(self, logits=None, assignments=None, tau=1.0, t=20, mode=None):
        self.logits = None if logits is None else [np.asarray(x, dtype=np.float64) for x in logits]
        self.assignments = None if assignments is None else [np.asarray(a, dtype=np.int64) for a in assignments]
        self.tau = float(tau)
        self.t = int(t)
        if mode is None:
            mode = "soft" if self.logits is not None else "hard"
        if mode not in ("soft", "hard"):
            raise ModeError(f"unknown mode {mode!r}")
        if self.logits is None and self.assignments is None:
            raise StateError("permutation set needs logits or assignments")
        self.mode = mode

    @classmethod
    def near_identity(cls, sizes: Sequence[int], scale=3.0, tau=1.0, t=20):
        return cls([scale * np.eye(n) for n in sizes], tau=tau, t=t)

    @classmethod
    def identity(cls, sizes: Sequence[int]):
        return cls(assignments=[np.arange(n) for n in sizes])

    @classmethod
    def from_hard(cls, perms: Sequence[HardPermutation]):
        return cls(assignments=[p.assignment for p in perms])

    def __len__(self):
        return len(self.logits if self.logits is not None else self.assignments)

    @property
    def sizes(self):
        src = self.logits if self.logits is not None else self.assignments
        return [len(x) for x in src]

    def soft_matrices(self, record=False):
        if self.logits is None:
            raise StateError("no logits: this permutation set is hard-only")
        out = [sinkhorn_soft(x, self.tau, self.t, record=record) for x in self.logits]
        return [o.S for o in out], ([o.trace for o in out] if record else None)

    def backward(self, dmats, traces):
        return [sinkhorn_backward(tr, d) for tr, d in zip(traces, dmats)]

    def hard(self) -> list[HardPermutation]:
        if self.assignments is not None and (self.mode == "hard" or self.logits is None):
            return [HardPermutation(a) for a in self.assignments]
        return [project_hard(S) for S in self.soft_matrices()[0]]

    def projected(self) -> "PermutationSet":
        return PermutationSet(assignments=[p.assignment for p in self.hard()], tau=self.tau, t=self.t)

    def matrices(self, mode=None):
        mode = mode or self.mode
        if mode == "soft":
            return self.soft_matrices()[0]
        return assignment_matrices([p.assignment for p in self.hard()])

    def copy(self):
        return PermutationSet(None if self.logits is None else [x.copy() for x in self.logits],
                              None if self.assignments is None else [a.copy() for a in self.assignments],
                              self.tau, self.t, self.mode)


@dataclass
class FusionMethod:
    kind: str = "interpolate"  # interpolate | rebasin | autofusion
    gamma: float = 0.5
    mode: str = "soft"

    def __post_init__(self):
        if self.kind not in ("interpolate", "rebasin", "autofusion"):
            raise ValueError(f"unknown fusion method {self.kind!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def _check(theta_a, theta_b, gamma):
    if theta_a.arch != theta_b.arch:
        raise DimensionError("cannot fuse models with different architectures")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")


def merge_interpolate(theta_a: ModelParams, theta_b: ModelParams, gamma: float = 0.5) -> ModelParams:
    """Entry-wise ``gamma * A + (1 - gamma) * B``."""
    _check(theta_a, theta_b, gamma)
    return interpolate(theta_a, theta_b, gamma)


def merge_rebasin(theta_a: ModelParams, theta_b: ModelParams, gamma: float, perms) -> ModelParams:
    """Interpolate A with B after hard re-basin permutation of B."""
    _check(theta_a, theta_b, gamma)
    if isinstance(perms, PermutationSet):
        if perms.mode != "hard":
            raise ModeError("re-basin merge needs a hard permutation set")
        perms = perms.hard()
    dtype = theta_b.weights[0].dtype
    mats = assignment_matrices([p.assignment for p in perms], dtype)
    return interpolate(theta_a, permute_params(theta_b, mats), gamma)


def merge_autofusion(theta_a: ModelParams, theta_b: ModelParams, gamma: float,
                     perms: PermutationSet, mode: str = "soft") -> ModelParams:
    """Interpolate A with B permuted by the Sinkhorn matrices of ``perms``.

    Hard mode projects each soft matrix to its nearest permutation first, so
    the result coincides with :func:`merge_rebasin` on the projected set.
    """
    _check(theta_a, theta_b, gamma)
    if mode == "hard":
        return merge_rebasin(theta_a, theta_b, gamma, perms.projected())
    if mode != "soft":
        raise ModeError(f"unknown mode {mode!r}")
    if perms.logits is None:
        raise StateError("soft merge requires permutation logits")
    mats = perms.soft_matrices()[0]
    a64, b64 = theta_a.astype(np.float64), theta_b.astype(np.float64)
    return interpolate(a64, permute_params(b64, mats), gamma)


def fuse(theta_a, theta_b, method: FusionMethod, perms: PermutationSet | None = None) -> ModelParams:
    if method.kind == "interpolate":
        return merge_interpolate(theta_a, theta_b, method.gamma)
    if perms is None:
        raise StateError(f"{method.kind} fusion needs a permutation set")
    if method.kind == "rebasin":
        return merge_rebasin(theta_a, theta_b, method.gamma,
                             perms if perms.mode == "hard" else perms.projected())
    return merge_autofusion(theta_a, theta_b, method.gamma, perms, method.mode)


@dataclass
class SweepRow:
    gamma: float
    acc_tasks: list
    acc_joint: float

    @property
    def acc_task_a(self):
        return self.acc_tasks[0]

    @property
    def acc_task_b(self):
        return self.acc_tasks[1]


def sweep_interpolation(theta_a: ModelParams, theta_b: ModelParams, method: FusionMethod,
                        grid_size: int, tasks: Sequence[LabeledDataset],
                        perms: PermutationSet | None = None) -> list[SweepRow]:
    """Fuse and evaluate at ``grid_size`` evenly spaced gammas in [0, 1].

    ``tasks`` are evaluation sets in the models' global label indexing.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    rows = []
    for gamma in np.linspace(0.0, 1.0, grid_size):
        m = FusionMethod(method.kind, float(gamma), method.mode)
        fused = fuse(theta_a, theta_b, m, perms)
        joint, per, _ = evaluate_tasks(fused, tasks)
        rows.append(SweepRow(float(gamma), per, joint))
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow]):
    ntask = len(rows[0].acc_tasks) if rows else 2
    names = [f"acc_task_{chr(ord('a') + k)}" for k in range(ntask)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", *names, "acc_joint"])
        for r in rows:
            w.writerow([f"{r.gamma:.6f}", *[f"{v:.6f}" for v in r.acc_tasks], f"{r.acc_joint:.6f}"])
