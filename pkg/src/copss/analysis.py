"""Equilibrium verification and characterization.

Checks fixed points of the negotiation dynamics (mutual-best-response
gaps), certifies uniqueness through the slope conditions and through
diagonal-dominance / P-matrix tests on the game Hessian, searches for
equilibria by brute-force grid enumeration, and compares outcomes against
the social optimum and a log-product bargaining solution.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import BargainingInfeasibleError, CopssError
from .game import (StrategyProfile, _fd_second_partials, br_slope_at,
                   profile_from_betas)
from .operators import (OperatorParams, Scenario, _golden_section,
                        baseline_utility, best_response, operator_model,
                        utility)

__all__ = [
    "UniquenessStatus",
    "IndexCheck",
    "EquilibriumCertificate",
    "WelfareResult",
    "BargainingResult",
    "verify_ne",
    "game_hessian",
    "is_p_matrix",
    "diag_dominance_index",
    "brute_force_ne",
    "welfare",
    "social_welfare_opt",
    "disagreement_preset",
    "nash_bargaining",
    "performance_gain",
]


class UniquenessStatus(enum.Enum):
    CERTIFIED_UNIQUE = "certified_unique"
    UNKNOWN = "unknown"


class IndexCheck(enum.Enum):
    DIAG_DOMINANT = "diag_dominant"
    P_MATRIX_VERIFIED = "p_matrix_verified"
    NOT_CHECKED = "not_checked"


@dataclass(frozen=True)
class EquilibriumCertificate:
    profile: StrategyProfile
    is_ne: bool
    per_op_br_gap: tuple[float, ...]
    uniqueness: UniquenessStatus
    index_check: IndexCheck = IndexCheck.NOT_CHECKED


@dataclass(frozen=True)
class WelfareResult:
    optimum: StrategyProfile
    welfare: float
    psi: float | None


@dataclass(frozen=True)
class BargainingResult:
    solution: StrategyProfile
    disagreement: tuple[float, ...]
    product_value: float


def verify_ne(scn: Scenario, profile: StrategyProfile,
              tol: float = 1e-4) -> EquilibriumCertificate:
    """Check mutual best responses at ``profile``.

    A profile is accepted when every operator's best-response gap is below
    ``tol``.  Uniqueness is certified when every implicit response slope
    lies in (-1, 0) at the profile, the distributed slope test.
    """
    gaps = []
    slopes_ok = True
    for i, op in enumerate(scn.operators):
        others = profile.others(i)
        br = best_response(op, scn, others, delta=profile.deltas[i])
        gaps.append(abs(br - profile.betas[i]))
        try:
            slope = br_slope_at(op, scn, profile.betas[i], others,
                                delta=profile.deltas[i])
        except CopssError:
            slopes_ok = False
            continue
        if scn.n_ops > 1 and not -1.0 < slope < 0.0:
            slopes_ok = False
    uniq = (UniquenessStatus.CERTIFIED_UNIQUE if slopes_ok
            else UniquenessStatus.UNKNOWN)
    return EquilibriumCertificate(profile, all(g < tol for g in gaps),
                                  tuple(gaps), uniq)


def game_hessian(scn: Scenario, profile: StrategyProfile) -> np.ndarray:
    """Game Hessian by finite differences: row i holds the second partials
    of operator i's utility; off-diagonal entries in a row coincide since
    opponents only enter through the pool sum."""
    n = scn.n_ops
    h = np.empty((n, n))
    for i, op in enumerate(scn.operators):
        model = operator_model(scn, op, profile.deltas[i])
        u_bb, u_bs = _fd_second_partials(model, profile.betas[i],
                                         profile.others(i))
        h[i, :] = u_bs
        h[i, i] = u_bb
    return h


def is_p_matrix(matrix: np.ndarray, margin: float = 0.0) -> bool:
    """True when every principal minor exceeds ``margin``  (2^n - 1 minors)."""
    m = np.asarray(matrix, dtype=float)
    n = m.shape[0]
    if n > 12:
        raise ValueError("P-matrix enumeration limited to n <= 12")
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            sel = np.ix_(subset, subset)
            if np.linalg.det(m[sel]) <= margin:
                return False
    return True


def diag_dominance_index(scn: Scenario, profile: StrategyProfile,
                         edge_tol: float = 1e-6) -> IndexCheck:
    """Equilibrium-index certificate from the negated game Hessian.

    Restricted to operators with interior shares (Hessian rows at box
    corners are excluded, mirroring the principal-sub-matrix treatment of
    boundary equilibria).  Row diagonal dominance with positive diagonal
    certifies directly; otherwise all principal minors are enumerated for
    up to 12 interior operators.
    """
    interior = []
    for i, op in enumerate(scn.operators):
        box = operator_model(scn, op, profile.deltas[i]).box
        if box.lo + edge_tol < profile.betas[i] < box.hi - edge_tol:
            interior.append(i)
    if not interior:
        return IndexCheck.NOT_CHECKED
    h = game_hessian(scn, profile)
    # sanity: H must match D(I - T) built from the slope ratios
    d = np.diag(np.diag(h))
    t = np.zeros_like(h)
    for i, op in enumerate(scn.operators):
        slope = br_slope_at(op, scn, profile.betas[i], profile.others(i),
                            delta=profile.deltas[i])
        t[i, :] = slope
        t[i, i] = 0.0
    identity_gap = np.max(np.abs(h - d @ (np.eye(scn.n_ops) - t)))
    if identity_gap > 1e-3 * max(1.0, np.max(np.abs(h))):
        return IndexCheck.NOT_CHECKED
    neg_h = -h[np.ix_(interior, interior)]
    diag = np.diag(neg_h)
    off = np.abs(neg_h).sum(axis=1) - np.abs(diag)
    if np.all(diag > 0) and np.all(np.abs(diag) > off):
        return IndexCheck.DIAG_DOMINANT
    if len(interior) <= 12 and is_p_matrix(neg_h):
        return IndexCheck.P_MATRIX_VERIFIED
    return IndexCheck.NOT_CHECKED


# ---------------------------------------------------------------------------
# Brute-force equilibrium search
# ---------------------------------------------------------------------------


def _discrete_br_tables(levels, value_fn):
    """Per-operator argmax tables over the opponent-sum lattice.

    ``levels[i]`` is operator i's share grid; all grids share one step so
    opponent sums land on a lattice addressed by an integer offset.
    """
    n = len(levels)
    tables = []
    for i in range(n):
        max_m = sum(len(levels[j]) - 1 for j in range(n) if j != i)
        table = np.empty(max_m + 1, dtype=np.int64)
        for m in range(max_m + 1):
            best_k, best_v = 0, -math.inf
            for k, b in enumerate(levels[i]):
                v = value_fn(i, k, m)
                if v > best_v:
                    best_k, best_v = k, v
            table[m] = best_k
        tables.append(table)
    return tables


def _cluster_candidates(cands, gaps):
    """Group lattice-adjacent discrete equilibria into connected clusters
    and keep per cluster the candidate with the smallest BR gap (ties:
    lexicographically first)."""
    gap_of = dict(zip(cands, gaps))
    unseen = set(cands)
    chosen: list[tuple[int, ...]] = []
    deltas = list(itertools.product((-1, 0, 1), repeat=len(cands[0]) if cands else 0))
    while unseen:
        seed = unseen.pop()
        component = [seed]
        frontier = [seed]
        while frontier:
            cur = frontier.pop()
            for d in deltas:
                nb = tuple(a + b for a, b in zip(cur, d))
                if nb in unseen:
                    unseen.remove(nb)
                    component.append(nb)
                    frontier.append(nb)
        chosen.append(min(component, key=lambda c: (gap_of[c], c)))
    return sorted(chosen)


def brute_force_ne(scn: Scenario | None, grid_points: int,
                   delta_policy: str = "max", objectives=None,
                   boxes=None):
    """Enumerate discrete mutual best responses on a shared-step grid.

    A grid profile counts as a discrete equilibrium when every coordinate
    is within one grid step of that operator's discrete best response;
    lattice-adjacent hits are merged to one representative per
    equilibrium.  Full enumeration costs grid_points^N best-response
    table lookups, so N <= 3.  ``objectives``/``boxes`` inject synthetic
    utilities (then plain share tuples are returned).
    """
    if objectives is not None:
        if boxes is None:
            raise ValueError("injected objectives need explicit boxes")
        n = len(objectives)
        lows = [b[0] for b in boxes]
        widths = [b[1] - b[0] for b in boxes]
    else:
        if scn is None:
            raise ValueError("need a scenario or injected objectives")
        n = scn.n_ops
        deltas = [op.delta_max if delta_policy == "max" else op.delta_for_baseline
                  for op in scn.operators]
        models = [operator_model(scn, op, d)
                  for op, d in zip(scn.operators, deltas)]
        lows = [m.box.lo for m in models]
        widths = [m.box.hi - m.box.lo for m in models]
    if n > 3:
        raise ValueError(
            "full-grid search costs grid_points**N best-response tables; "
            "restrict to N <= 3 or use the iterative dynamics")
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")

    step = max(widths) / (grid_points - 1)
    levels = [
        [lows[i] + k * step for k in range(int(math.floor(widths[i] / step + 1e-9)) + 1)]
        for i in range(n)
    ]
    base_others = [sum(lows[j] for j in range(n) if j != i) for i in range(n)]

    if objectives is not None:
        def value_fn(i, k, m):
            return objectives[i](levels[i][k], base_others[i] + m * step)
    else:
        def value_fn(i, k, m):
            return models[i].utility_value(levels[i][k], base_others[i] + m * step)

    tables = _discrete_br_tables(levels, value_fn)

    sizes = [len(lv) for lv in levels]
    if n == 1:
        cands = [(int(tables[0][0]),)]
        gaps = [0]
    else:
        idx = [np.arange(s) for s in sizes]
        diffs = []
        for i in range(n):
            others = [idx[j] for j in range(n) if j != i]
            if n == 2:
                m = others[0]
                br = tables[i][m]
                diff = np.abs(idx[i][:, None] - br[None, :]) if i == 0 else \
                    np.abs(idx[i][None, :] - br[:, None])
            else:
                j, k = [j for j in range(n) if j != i]
                m = idx[j][:, None] + idx[k][None, :]
                br = tables[i][m]
                shape = [1, 1, 1]
                shape[i] = sizes[i]
                own = idx[i].reshape(shape)
                exp = [sizes[j] if ax == j else (sizes[k] if ax == k else 1)
                       for ax in range(n)]
                diff = np.abs(own - br.reshape(exp))
            diffs.append(diff)
        total = np.maximum.reduce([np.broadcast_to(d, sizes) for d in diffs])
        hits = np.argwhere(total <= 1)
        cands = [tuple(int(v) for v in h) for h in hits]
        gaps = [int(total[tuple(h)]) for h in hits]

    chosen = _cluster_candidates(cands, gaps)
    results = [tuple(levels[i][k] for i, k in enumerate(c)) for c in chosen]
    if objectives is not None:
        return results
    return [profile_from_betas(scn, r, delta_policy) for r in results]


# ---------------------------------------------------------------------------
# Welfare, bargaining, gain
# ---------------------------------------------------------------------------


def welfare(scn: Scenario, betas, deltas=None) -> float:
    """Sum of operator utilities at a share vector."""
    total = sum(betas)
    out = 0.0
    for i, op in enumerate(scn.operators):
        d = None if deltas is None else deltas[i]
        model = operator_model(scn, op, d)
        out += utility(op, model.rate_triple(betas[i], total))
    return out


def _coordinate_ascent(scn: Scenario, objective, start, boxes,
                       sweeps: int = 60, tol: float = 1e-6):
    x = list(start)
    for _ in range(sweeps):
        moved = 0.0
        for i in range(len(x)):
            lo, hi = boxes[i]
            xi, _, _ = _golden_section(
                lambda t: objective(x[:i] + [t] + x[i + 1:]), lo, hi, tol)
            moved = max(moved, abs(xi - x[i]))
            x[i] = xi
        if moved < tol:
            break
    return x


def _multi_start(scn: Scenario, objective, boxes, ne_betas, n_starts: int,
                 seed: int):
    rng = np.random.default_rng(seed)
    starts = []
    if ne_betas is not None:
        starts.append(list(ne_betas))
    starts.append([0.5 * (lo + hi) for lo, hi in boxes])
    while len(starts) < n_starts:
        starts.append([lo + rng.random() * (hi - lo) for lo, hi in boxes])
    best_x, best_v = None, -math.inf
    for s in starts:
        x = _coordinate_ascent(scn, objective, s, boxes)
        v = objective(x)
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v


def social_welfare_opt(scn: Scenario, ne_profile: StrategyProfile | None = None,
                       n_starts: int = 20, seed: int = 2024) -> WelfareResult:
    """Maximize the utility sum over the joint box by multi-start
    coordinate ascent (the converged equilibrium, when supplied, seeds one
    start, so the reported optimum can never fall below it)."""
    boxes = [(m.box.lo, m.box.hi)
             for m in (operator_model(scn, op) for op in scn.operators)]
    ne_betas = None if ne_profile is None else ne_profile.betas
    x, v = _multi_start(scn, lambda b: welfare(scn, b), boxes, ne_betas,
                        n_starts, seed)
    psi = None
    if ne_profile is not None:
        psi = welfare(scn, ne_profile.betas, ne_profile.deltas) / v
    return WelfareResult(profile_from_betas(scn, x), v, psi)


def disagreement_preset(scn: Scenario, kind: str,
                        ne_profile: StrategyProfile | None = None) -> tuple[float, ...]:
    """Disagreement utilities: "zero", "baseline" (no sharing) or "ne"."""
    if kind == "zero":
        return tuple(0.0 for _ in scn.operators)
    if kind == "baseline":
        return tuple(baseline_utility(op, scn).u_min for op in scn.operators)
    if kind == "ne":
        if ne_profile is None:
            raise ValueError("'ne' disagreement needs the equilibrium profile")
        return tuple(
            utility(op, operator_model(scn, op, ne_profile.deltas[i])
                    .rate_triple(ne_profile.betas[i], ne_profile.total))
            for i, op in enumerate(scn.operators))
    raise ValueError(f"unknown disagreement preset {kind!r}")


def nash_bargaining(scn: Scenario, disagreement,
                    n_starts: int = 20, seed: int = 2024) -> BargainingResult:
    """Maximize the product of utility surpluses over the joint box.

    Works on the log product (equivalently the sum of log surpluses),
    restricted to profiles where every operator improves on its
    disagreement utility.  Raises when no sampled profile does.
    """
    d = tuple(disagreement)
    if len(d) != scn.n_ops:
        raise ValueError("need one disagreement utility per operator")
    boxes = [(m.box.lo, m.box.hi)
             for m in (operator_model(scn, op) for op in scn.operators)]

    def log_product(betas) -> float:
        value = 0.0
        for i, op in enumerate(scn.operators):
            u = utility(op, operator_model(scn, op)
                        .rate_triple(betas[i], sum(betas)))
            surplus = u - d[i]
            if surplus <= 0.0:
                return -math.inf
            value += math.log(surplus)
        return value

    rng = np.random.default_rng(seed)
    feasible = None
    for _ in range(400):
        cand = [lo + rng.random() * (hi - lo) for lo, hi in boxes]
        if math.isfinite(log_product(cand)):
            feasible = cand
            break
    if feasible is None:
        raise BargainingInfeasibleError(
            "no sampled profile improves every operator over its disagreement")
    x, v = _multi_start(scn, log_product, boxes, feasible, n_starts, seed)
    if not math.isfinite(v):
        raise BargainingInfeasibleError("bargaining search left the "
                                        "improvement set")
    return BargainingResult(profile_from_betas(scn, x), d, math.exp(v))


def performance_gain(op: OperatorParams, scn: Scenario,
                     profile: StrategyProfile) -> float:
    """Weighted-rate ratio against the no-sharing operating point.

    Inter-D2D users fall back to the cellular rate without sharing, so
    the reference combines the cellular baseline under w_c + w_s.
    """
    i = scn.operators.index(op)
    base = baseline_utility(op, scn)
    w_c, w_d, w_s = op.weights
    denom = (w_c + w_s) * base.q_c + w_d * base.q_d
    if denom == 0.0:
        raise ZeroDivisionError(
            "degenerate scenario: no-sharing reference rate is zero")
    model = operator_model(scn, op, profile.deltas[i])
    t = model.rate_triple(profile.betas[i], profile.total)
    return (w_c * t.q_c + w_d * t.q_d + w_s * t.q_s) / denom
