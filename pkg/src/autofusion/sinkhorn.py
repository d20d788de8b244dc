"""Sinkhorn relaxation of permutations, exact linear assignment, weight matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import DimensionError, ModelParams, TraceError, assignment_matrices, permute_params


class AssignmentInputError(ValueError):
    pass


@dataclass
class SinkhornTrace:
    logits: np.ndarray
    tau: float
    kernel: np.ndarray  # exp(X / tau - row shift)
    us: list  # row scalings after each row normalization
    vs: list  # column scalings; vs[0] is all ones


@dataclass
class SoftPermutation:
    S: np.ndarray
    residual: float
    trace: SinkhornTrace | None = field(default=None, repr=False)


@dataclass
class HardPermutation:
    assignment: np.ndarray

    @property
    def n(self):
        return len(self.assignment)

    @property
    def P(self) -> np.ndarray:
        return assignment_matrices([self.assignment])[0]

    def is_identity(self):
        return bool(np.array_equal(self.assignment, np.arange(self.n)))


def residual(S) -> float:
    """Largest deviation of any row or column sum from 1."""
    S = np.asarray(S)
    if S.size == 0:
        return 0.0
    return float(max(np.abs(S.sum(axis=1) - 1).max(), np.abs(S.sum(axis=0) - 1).max()))


def sinkhorn_soft(X, tau: float = 1.0, t: int = 20, record: bool = False) -> SoftPermutation:
    """``t`` rounds of row- then column-normalization applied to ``exp(X / tau)``.

    Every iterate has the form ``diag(u) K diag(v)`` with ``K = exp(X / tau)``,
    so a row normalization sets ``u = 1 / (K v)`` and a column normalization
    ``v = 1 / (K^T u)``; only the scaling vectors are stored. The row maximum
    of ``X / tau`` is subtracted from ``K`` when ``t >= 1`` (the first row
    normalization cancels it exactly).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if t < 0:
        raise ValueError("t must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise DimensionError(f"logits must be square, got {X.shape}")
    Z = X / tau
    if t > 0 and Z.size:
        Z = Z - Z.max(axis=1, keepdims=True)
    K = np.exp(Z)
    if t == 0:
        trace = SinkhornTrace(X, tau, K, [], []) if record else None
        return SoftPermutation(K, residual(K), trace)
    v = np.ones(len(K))
    us, vs = [], [v]
    for _ in range(t):
        u = 1.0 / (K @ v)
        v = 1.0 / (u @ K)
        us.append(u)
        vs.append(v)
    S = u[:, None] * K * v[None, :]
    trace = SinkhornTrace(X, tau, K, us, vs) if record else None
    return SoftPermutation(S, residual(S), trace)


def sinkhorn_backward(trace: SinkhornTrace | SoftPermutation | None, dS) -> np.ndarray:
    """Exact reverse-mode gradient of the unrolled ``t``-step operator.

    Each scaling update contributes a rank-one term to d(loss)/dK; the terms
    are collected and summed with a single matrix product.
    """
    if isinstance(trace, SoftPermutation):
        trace = trace.trace
    if trace is None:
        raise TraceError("sinkhorn intermediates were not recorded")
    G = np.asarray(dS, dtype=np.float64)
    K = trace.kernel
    if not trace.us:
        return G * K / trace.tau
    u, v = trace.us[-1], trace.vs[-1]
    GK = G * K
    gu = GK @ v
    gv = u @ GK
    dK = u[:, None] * G * v[None, :]
    left, right = [], []
    for k in range(len(trace.us), 0, -1):
        uk, vk, vprev = trace.us[k - 1], trace.vs[k], trace.vs[k - 1]
        dc = -gv * vk * vk  # v_k = 1 / (K^T u_k)
        left.append(uk)
        right.append(dc)
        gu = gu + K @ dc
        dr = -gu * uk * uk  # u_k = 1 / (K v_{k-1})
        left.append(dr)
        right.append(vprev)
        gv = dr @ K
        gu = np.zeros_like(gu)
    dK += np.stack(left, axis=1) @ np.stack(right, axis=0)
    return dK * K / trace.tau


def error_bound(X, tau: float) -> float:
    """Upper bound ``max|X|^2 / (2 tau)`` on ``<P* - S_tau(X), X>_F``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    X = np.asarray(X, dtype=np.float64)
    m = float(np.abs(X).max()) if X.size else 0.0
    return m * m / (2.0 * tau)


def approximation_gap(X, tau: float, t: int = 20) -> float:
    """Measured ``<P* - S, X>_F`` with ``P*`` the exact maximizing assignment."""
    X = np.asarray(X, dtype=np.float64)
    P = hungarian(X, "max").P
    return float(((P - sinkhorn_soft(X, tau, t).S) * X).sum())


# --- linear assignment ------------------------------------------------------

def _lap_min(C):
    """Shortest-augmenting-path Hungarian method with row/column potentials.

    Returns (row -> column assignment, row potentials u, column potentials v).
    """
    n = C.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: 1-based row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    assign[p[1:] - 1] = np.arange(n)
    return assign, u[1:], v[1:]


def _lexicographic_min(assign, tight):
    """Among perfect matchings of the tight-edge graph, move to the one whose
    row->column vector is lexicographically smallest (lowest index wins ties)."""
    n = len(assign)
    assign = assign.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[assign] = np.arange(n)
    fixed_col = np.zeros(n, dtype=bool)
    for i in range(n):
        for c in np.flatnonzero(tight[i] & ~fixed_col):
            if c == assign[i]:
                break
            target = assign[i]
            # alternating path: owner(c) must move, chaining through unfixed rows to `target`
            start = owner[c]
            prev = {start: None}
            queue = [start]
            found = None
            while queue and found is None:
                r = queue.pop(0)
                for c2 in np.flatnonzero(tight[r] & ~fixed_col):
                    if c2 == c or c2 == assign[r]:
                        continue
                    if c2 == target:
                        found = (r, c2)
                        break
                    r2 = owner[c2]
                    if r2 not in prev and r2 != i:
                        prev[r2] = (r, c2)
                        queue.append(r2)
            if found is None:
                continue
            r, c2 = found
            while True:
                old = assign[r]
                assign[r] = c2
                owner[c2] = r
                if prev[r] is None:
                    break
                r, c2 = prev[r][0], old
            assign[i] = c
            owner[c] = i
            break
        fixed_col[assign[i]] = True
    return assign


def hungarian(matrix, sense: str = "min") -> HardPermutation:
    """Exactly optimal square assignment; ties go to the lowest column index,
    resolved row by row from the first row."""
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise AssignmentInputError(f"assignment needs a square matrix, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise AssignmentInputError("assignment matrix has non-finite entries")
    if sense not in ("min", "max"):
        raise AssignmentInputError(f"sense must be 'min' or 'max', not {sense!r}")
    n = M.shape[0]
    if n == 0:
        return HardPermutation(np.zeros(0, dtype=np.int64))
    C = -M if sense == "max" else M
    C = C - C.min()
    assign, u, v = _lap_min(C)
    reduced = C - u[:, None] - v[None, :]
    tol = 1e-9 * max(1.0, float(np.abs(C).max()))
    tight = reduced <= tol
    if tight.sum() > n:
        assign = _lexicographic_min(assign, tight)
    return HardPermutation(assign)


def project_hard(S) -> HardPermutation:
    """Nearest permutation to a soft matrix (max-inner-product assignment)."""
    if isinstance(S, SoftPermutation):
        S = S.S
    return hungarian(S, "max")


# --- weight matching --------------------------------------------------------

def match_distance(theta_a: ModelParams, theta_b: ModelParams, assignments=None) -> float:
    """Mean over layers of ``||W_A - P_l W_B P_{l-1}^T||^2 + ||b_A - P_l b_B||^2``."""
    pb = theta_b if assignments is None else permute_params(
        theta_b, assignment_matrices(assignments, theta_b.weights[0].dtype))
    total = 0.0
    for wa, wb, ba, bb in zip(theta_a.weights, pb.weights, theta_a.biases, pb.biases):
        total += float(((wa - wb) ** 2).sum()) + float(((ba - bb) ** 2).sum())
    return total / theta_a.num_layers


def _permute_in(wg, perm):
    return wg[:, perm, :]


def weight_match(theta_a: ModelParams, theta_b: ModelParams, max_sweeps: int = 100,
                 seed: int = 0, history: list | None = None) -> list[HardPermutation]:
    """Coordinate-descent weight matching of ``theta_b`` onto ``theta_a``.

    Each update solves one interface's assignment exactly with the others
    fixed, so the distance never increases. Layers are visited in a seeded
    random order each sweep until a sweep changes nothing.
    """
    if theta_a.arch != theta_b.arch:
        raise DimensionError("architectures differ")
    arch = theta_a.arch
    sizes = arch.perm_sizes()
    nl = theta_a.num_layers
    perms = [np.arange(n) for n in sizes]
    ga = [theta_a.grouped(l).astype(np.float64) for l in range(nl)]
    gb = [theta_b.grouped(l).astype(np.float64) for l in range(nl)]
    ba = [b.astype(np.float64) for b in theta_a.biases]
    bb = [b.astype(np.float64) for b in theta_b.biases]
    rng = np.random.default_rng(seed)
    if history is not None:
        history.append(match_distance(theta_a, theta_b, perms))
    for _ in range(max_sweeps):
        changed = False
        for l in rng.permutation(len(sizes)):
            # layer l: rows of W_B permuted by P_l, columns by P_{l-1}
            wb = gb[l] if l == 0 else _permute_in(gb[l], perms[l - 1])
            profit = ga[l].reshape(sizes[l], -1) @ wb.reshape(sizes[l], -1).T
            profit += np.outer(ba[l], bb[l])
            # layer l+1: columns of W_B permuted by P_l, rows by P_{l+1}
            wn = gb[l + 1] if l + 1 >= len(sizes) else gb[l + 1][perms[l + 1]]
            an = ga[l + 1].transpose(1, 0, 2).reshape(sizes[l], -1)
            profit += an @ wn.transpose(1, 0, 2).reshape(sizes[l], -1).T
            old_score = profit[np.arange(sizes[l]), perms[l]].sum()
            new = hungarian(profit, "max").assignment
            new_score = profit[np.arange(sizes[l]), new].sum()
            if new_score > old_score + 1e-12 * max(1.0, abs(old_score)) and not np.array_equal(new, perms[l]):
                perms[l] = new
                changed = True
                if history is not None:
                    history.append(match_distance(theta_a, theta_b, perms))
        if not changed:
            break
    return [HardPermutation(p) for p in perms]
