"""Iterative spectrum-negotiation dynamics and their convergence checks.

Operators repeatedly exchange pool-share proposals.  The damped update
``beta_i <- (1-kappa_i) beta_i + kappa_i BR_i(beta_-i)`` contains plain
best response as the ``kappa_i = 1`` special case; because each utility
couples to the opponents only through the pool sum, the update Jacobian
has identical off-diagonal entries per row, which yields an exact scalar
eigenvalue criterion and per-operator smoothing bounds.  All of the
convergence/uniqueness conditions are evaluated as runtime checks and
recorded per iteration.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import operators as op_mod
from . import stochgeom as sg
from .errors import ConditionViolatedError, InfeasibleError, StructureError
from .operators import (OperatorParams, Scenario, best_response,
                        operator_model, utility)

__all__ = [
    "DynamicsMode",
    "KappaPolicy",
    "Verdict",
    "StrategyProfile",
    "JacobianEstimate",
    "DynamicsConfig",
    "IterationRecord",
    "ConvergenceReport",
    "profile_from_betas",
    "jacobian_br",
    "br_slope_at",
    "kappa_max",
    "kappa_bound",
    "jp_step",
    "contraction_check",
    "gerschgorin_bound",
    "gerschgorin_inside_unit",
    "pooled_eigen_condition",
    "run_dynamics",
]

_EXCLUDE_MARGIN = 1e-9     # open-interval margin for the uniqueness test
_CURVATURE_FLOOR = 1e-12   # below this |d2U/db2| the BR slope is undefined
_KAPPA_SAFETY = 0.95       # strictly-inside factor on the smoothing bound


class DynamicsMode(enum.Enum):
    BEST_RESPONSE = "br"
    JACOBI_PLAY = "jp"


class KappaPolicy(enum.Enum):
    """How the smoothing parameter is chosen outside the contraction region.

    PAPER_BOUND derives it from an upper bound on the BR slope; DOMINANT_ZERO
    centers the Gerschgorin discs at zero; FIXED uses a constant.
    """

    PAPER_BOUND = "paper"
    DOMINANT_ZERO = "dominant"
    FIXED = "fixed"


class Verdict(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    OSCILLATING = "oscillating"
    OPERATOR_WITHDREW = "operator_withdrew"


@dataclass(frozen=True)
class StrategyProfile:
    """Pool shares plus each operator's internal band allocation."""

    betas: tuple[float, ...]
    deltas: tuple[float, ...]
    splits: tuple[tuple[float, float], ...]

    @property
    def total(self) -> float:
        return sum(self.betas)

    def others(self, i: int) -> float:
        return self.total - self.betas[i]


@dataclass(frozen=True)
class DynamicsConfig:
    """Settings of one dynamics run."""

    mode: DynamicsMode = DynamicsMode.JACOBI_PLAY
    init: str | tuple[float, ...] = "beta_min"   # beta_min | midpoint | random
    tol: float = 1e-6
    max_iters: int = 500
    kappa_policy: KappaPolicy = KappaPolicy.PAPER_BOUND
    kappa_value: float = 1.0
    delta_policy: str = "max"                    # max | baseline
    seed: int = 0
    oscillation_tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if isinstance(self.init, str):
            if self.init not in ("beta_min", "midpoint", "random"):
                raise ValueError(f"unknown init preset {self.init!r}")
        if self.delta_policy not in ("max", "baseline"):
            raise ValueError(f"unknown delta policy {self.delta_policy!r}")
        if self.kappa_policy is KappaPolicy.FIXED and not self.kappa_value > 0:
            raise ValueError("fixed kappa must be positive")


@dataclass
class JacobianEstimate:
    """Per-operator BR slopes, smoothing weights and the update Jacobian.

    Row i holds kappa_i * slope_i off the diagonal and 1 - kappa_i on it,
    so kappa = 1 rows reduce to the plain best-response Jacobian.
    """

    br_slopes: tuple[float, ...]
    kappas: tuple[float, ...]
    matrix: np.ndarray

    @classmethod
    def assemble(cls, br_slopes, kappas) -> "JacobianEstimate":
        slopes = tuple(float(s) for s in br_slopes)
        kap = tuple(float(k) for k in kappas)
        if len(slopes) != len(kap):
            raise ValueError("need one kappa per operator")
        n = len(slopes)
        m = np.empty((n, n))
        for i in range(n):
            m[i, :] = kap[i] * slopes[i]
            m[i, i] = 1.0 - kap[i]
        return cls(slopes, kap, m)

    def row_sums(self) -> np.ndarray:
        abs_m = np.abs(self.matrix)
        return abs_m.sum(axis=1)


@dataclass(frozen=True)
class IterationRecord:
    """One line of the dynamics trace.

    ``br_slopes`` are the boundary-aware response derivatives that govern
    the update map (0 when the response is pinned at a box edge);
    ``implicit_slopes`` are the implicit-function ratios -U_bs/U_bb at the
    response point, the quantity the uniqueness conditions constrain
    (box clipping ignored).
    """

    iteration: int
    betas: tuple[float, ...]
    br_values: tuple[float, ...]
    kappas: tuple[float, ...]
    br_slopes: tuple[float, ...]
    implicit_slopes: tuple[float, ...]
    step_norm: float
    uniqueness_ok: bool
    br_contraction_ok: bool
    kappa_fallbacks: tuple[bool, ...]


@dataclass
class ConvergenceReport:
    """Full record of one dynamics run."""

    verdict: Verdict
    final: StrategyProfile
    trajectory: list[StrategyProfile]
    kappa_history: list[tuple[float, ...]]
    jacobian_history: list[JacobianEstimate]
    condition_flags: list[dict]
    records: list[IterationRecord]
    excluded: tuple[int, ...]
    withdrawn: tuple[int, ...] = ()

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def converged(self) -> bool:
        return self.verdict is Verdict.CONVERGED


# ---------------------------------------------------------------------------
# Profiles and slope estimation
# ---------------------------------------------------------------------------


def _delta_of(op: OperatorParams, policy: str) -> float:
    return op.delta_max if policy == "max" else op.delta_for_baseline


def profile_from_betas(scn: Scenario, betas, delta_policy: str = "max") -> StrategyProfile:
    """Attach mode fractions and internal splits to a share vector."""
    deltas = tuple(_delta_of(op, delta_policy) for op in scn.operators)
    splits = []
    for op, d, b in zip(scn.operators, deltas, betas):
        model = operator_model(scn, op, d)
        splits.append(model.split(b) if b <= model.beta_max_raw else (0.0, 0.0))
    return StrategyProfile(tuple(float(b) for b in betas), deltas, tuple(splits))


def _fd_second_partials(model, b: float, s: float) -> tuple[float, float]:
    """Central-difference (d2U/db2, d2U/db ds) of one operator's utility.

    The stencil center shifts inward when ``b`` sits at a box edge so all
    probes stay inside the feasible band split.
    """
    h_b = 1e-3 * max(abs(b), 0.1)
    h_s = 1e-3 * max(abs(s), 0.1)
    box = model.box
    width = box.hi - box.lo
    if width <= 0:
        raise ConditionViolatedError(
            "cannot probe utility curvature on a degenerate strategy box")
    h_b = min(h_b, width / 4.0)
    b = min(max(b, box.lo + h_b), box.hi - h_b)
    h_s = min(h_s, max(s / 2, 1e-7)) if s > 0 else 1e-7

    u = model.utility_value
    u_bb = (u(b + h_b, s) - 2.0 * u(b, s) + u(b - h_b, s)) / h_b ** 2
    if s >= h_s:
        u_bs = (u(b + h_b, s + h_s) - u(b + h_b, s - h_s)
                - u(b - h_b, s + h_s) + u(b - h_b, s - h_s)) / (4.0 * h_b * h_s)
    else:
        u_bs = (u(b + h_b, s + h_s) - u(b + h_b, s)
                - u(b - h_b, s + h_s) + u(b - h_b, s)) / (2.0 * h_b * h_s)
    return u_bb, u_bs


def br_slope_at(op: OperatorParams, scn: Scenario, beta_i: float,
                beta_others: float, delta: float | None = None) -> float:
    """Implicit-function slope -U_bs/U_bb evaluated at an arbitrary point.

    At a best response this is the slope of the response map; away from it
    the same ratio is what the Hessian identity H = D(I - T) uses.
    """
    model = operator_model(scn, op, delta)
    u_bb, u_bs = _fd_second_partials(model, beta_i, beta_others)
    if abs(u_bb) < _CURVATURE_FLOOR:
        raise ConditionViolatedError(
            f"degenerate utility curvature {u_bb!r}: BR slope undefined")
    return -u_bs / u_bb


def jacobian_br(op_index: int, scn: Scenario, profile: StrategyProfile,
                delta: float | None = None) -> float:
    """Slope of operator ``op_index``'s best response to any single opponent.

    All opponents enter through the pool sum, so the slope is the same for
    every j != i.  Evaluated at (BR_i(beta_-i), beta_-i) from central
    finite differences of the mixed and pure second partials; a response
    pinned at a box edge over the probe neighborhood has slope 0.
    """
    op = scn.operators[op_index]
    s = profile.others(op_index)
    d = delta if delta is not None else profile.deltas[op_index]
    model = operator_model(scn, op, d)
    b_star = best_response(op, scn, s, delta=d)
    box = model.box
    h = 1e-3 * max(abs(b_star), 0.1)
    if b_star - box.lo < h or box.hi - b_star < h:
        return 0.0
    return br_slope_at(op, scn, b_star, s, delta=d)


# ---------------------------------------------------------------------------
# Smoothing-parameter selection
# ---------------------------------------------------------------------------


def kappa_max(j_br: float, n_ops: int) -> float:
    """Largest smoothing weight that keeps the damped update contracting,
    2/(1 + (N-1)|J_br|).  Requires the uniqueness range -1 < J_br < 0."""
    if not -1.0 < j_br < 0.0:
        raise ConditionViolatedError(
            f"BR slope {j_br!r} outside (-1, 0): uniqueness prerequisite fails")
    return 2.0 / (1.0 + (n_ops - 1) * abs(j_br))


@dataclass(frozen=True)
class KappaBound:
    """A safe smoothing weight with its slope bound and provenance."""

    value: float
    j_bar: float
    used_fallback: bool


def _second_partials_any(model, b: float, s: float) -> tuple[float, float]:
    if model.analytic_derivatives_available():
        return model.second_partials(b, s)
    return _fd_second_partials(model, b, s)


def kappa_bound(op: OperatorParams, scn: Scenario, profile: StrategyProfile,
                delta: float | None = None) -> KappaBound:
    """Smoothing weight strictly inside the convergence range.

    Bounds the pool-term curvature by dropping its interference Laplace
    factor (valid whenever some inter-D2D users share the pool, q > 0),
    assembles an upper bound on |J_br| from it, and applies a 0.95 safety
    factor to 2/(1+(N-1)|Jbar|).  Falls back to an inflated measured
    slope when the D2D noise level is zero and the bound integral is
    unusable; the fallback is flagged.
    """
    if scn.q <= 0.0:
        raise ValueError("kappa_bound needs q > 0 (pool curvature bound)")
    i = scn.operators.index(op)
    d = delta if delta is not None else profile.deltas[i]
    model = operator_model(scn, op, d)
    s = profile.others(i)
    # the slope being bounded lives at the response point, not the profile
    b = best_response(op, scn, s, delta=d)
    u_bb, u_bs = _second_partials_any(model, b, s)
    a_meas = abs(u_bs)
    b_excess = max(abs(u_bb) - a_meas, 0.0)
    n = scn.n_ops

    raw = model.rates.pool_curvature_bound(b + s)
    if not math.isfinite(raw):
        j_fd = a_meas / max(abs(u_bb), _CURVATURE_FLOOR)
        j_bar = min(1.1 * j_fd, 1.0 - 1e-9)
        return KappaBound(_KAPPA_SAFETY * 2.0 / (1.0 + (n - 1) * j_bar),
                          j_bar, True)

    w_s, q = op.w_s, scn.q
    if op.utility is op_mod.UtilityKind.WEIGHTED_SUM:
        a_bar = w_s * q * raw
    else:
        triple = model.rate_triple(b, b + s)
        g1 = q * model.rates.scaled(sg.LinkKind.INTER_D2D, b + s, 1)
        a_bar = w_s * (q * raw * triple.q_s + g1 ** 2) / triple.q_s ** 2
    a_bar = max(a_bar, a_meas)
    j_bar = a_bar / (a_bar + b_excess) if a_bar > 0 else 0.0
    j_bar = min(j_bar, 1.0 - 1e-12)
    return KappaBound(_KAPPA_SAFETY * 2.0 / (1.0 + (n - 1) * j_bar),
                      j_bar, False)


# ---------------------------------------------------------------------------
# Update step and matrix conditions
# ---------------------------------------------------------------------------


def jp_step(betas, br_values, kappas, boxes) -> tuple[float, ...]:
    """One damped simultaneous update, clamped into each operator's box.

    With kappa_i = 1 the result equals the best response bit for bit.
    """
    out = []
    for b, br, k, box in zip(betas, br_values, kappas, boxes):
        if k <= 0:
            raise ValueError("kappa must be positive")
        out.append(box.clamp((1.0 - k) * b + k * br))
    return tuple(out)


def _as_matrix(jac) -> np.ndarray:
    if isinstance(jac, JacobianEstimate):
        return jac.matrix
    return np.asarray(jac, dtype=float)


def contraction_check(jac) -> bool:
    """Row-sum (infinity-norm) contraction test: sufficient, not necessary."""
    m = np.abs(_as_matrix(jac))
    return bool(m.sum(axis=1).max() < 1.0)


def gerschgorin_bound(jac) -> list[tuple[float, float]]:
    """Per-row real eigenvalue enclosure [J_ii - R_i, J_ii + R_i]."""
    m = _as_matrix(jac)
    out = []
    for i in range(m.shape[0]):
        radius = float(np.abs(m[i]).sum() - abs(m[i, i]))
        out.append((float(m[i, i]) - radius, float(m[i, i]) + radius))
    return out


def gerschgorin_inside_unit(jac) -> bool:
    return all(-1.0 < lo and hi < 1.0 for lo, hi in gerschgorin_bound(jac))


def pooled_eigen_condition(jac, tol: float = 1e-10) -> bool:
    """Exact scalar test for all |eigenvalues| < 1 on pool-structured
    matrices (identical negative off-diagonal entries J_i in each row).

    With c_i = -J_i > 0 and diagonal excesses d_i = J_ii - J_i, the
    eigenvalues are real and solve sum_i c_i/(xi - d_i) = -1, one in each
    gap of the sorted d_i plus one below.  All lie in (-1, 1) iff

        sum_i c_i/(1 + d_i) < 1            (smallest root above -1)

    together with every d_i < 1, or, when exactly one d_i exceeds 1,
    sum_i c_i/(1 - d_i) < -1 (the top-gap root still left of 1).  The
    first condition with all |d_i| < 1 is the commonly quoted pair; the
    top-gap refinement keeps the test equivalent to a direct
    eigendecomposition when a diagonal excess reaches 1.

    Raises :class:`StructureError` when the matrix lacks the structure.
    """
    m = _as_matrix(jac)
    n = m.shape[0]
    slopes = []
    for i in range(n):
        off = np.delete(m[i], i)
        if off.size == 0:
            slopes.append(0.0)
            continue
        if np.max(off) - np.min(off) > tol:
            raise StructureError(
                f"row {i} off-diagonal entries differ beyond {tol}")
        slopes.append(float(off[0]))
    if n == 1:
        return abs(float(m[0, 0])) < 1.0
    if any(s >= 0.0 for s in slopes):
        raise StructureError("pool structure requires negative off-diagonals")
    c = [-s for s in slopes]
    d = [float(m[i, i]) - slopes[i] for i in range(n)]
    if min(d) <= -1.0:
        return False  # the root below min(d) cannot exceed -1
    if sum(ci / (1.0 + di) for ci, di in zip(c, d)) >= 1.0:
        return False
    top = sorted(d)
    if top[-1] < 1.0:
        return True
    if top[-2] >= 1.0 or top[-1] == 1.0:
        return False  # a whole gap (or a repeated excess) at or above 1
    return sum(ci / (1.0 - di) for ci, di in zip(c, d)) < -1.0


# ---------------------------------------------------------------------------
# The dynamics loop
# ---------------------------------------------------------------------------


def _initial_betas(scn: Scenario, cfg: DynamicsConfig, boxes) -> tuple[float, ...]:
    if not isinstance(cfg.init, str):
        betas = tuple(float(b) for b in cfg.init)
        if len(betas) != scn.n_ops:
            raise ValueError("init vector length must match operator count")
        return tuple(box.clamp(b) for b, box in zip(betas, boxes))
    if cfg.init == "beta_min":
        return tuple(box.lo for box in boxes)
    if cfg.init == "midpoint":
        return tuple(0.5 * (box.lo + box.hi) for box in boxes)
    rng = np.random.default_rng(cfg.seed)
    return tuple(box.lo + rng.random() * (box.hi - box.lo) for box in boxes)


def run_dynamics(scn: Scenario, cfg: DynamicsConfig | None = None,
                 on_iteration=None) -> ConvergenceReport:
    """Run best-response or Jacobi-play negotiation to a fixed point.

    All operators update simultaneously.  Operators whose BR slope falls
    outside (-1, 0) at the initial profile are excluded up front (their
    participation could produce multiple equilibria) and hold share 0.
    Inside the contraction region the smoothing weight is 1; outside it
    the configured policy picks a safe value.  After convergence every
    participant must keep at least its no-sharing utility or the run is
    reported as a withdrawal.
    """
    cfg = cfg or DynamicsConfig()
    deltas = tuple(_delta_of(op, cfg.delta_policy) for op in scn.operators)
    models = [operator_model(scn, op, d) for op, d in zip(scn.operators, deltas)]
    boxes = [m.box for m in models]
    for i, box in enumerate(boxes):
        if box.clamped or box.empty:
            raise InfeasibleError(
                f"operator {i} has an empty strategy box; it cannot participate")

    betas = list(_initial_betas(scn, cfg, boxes))
    profile = profile_from_betas(scn, betas, cfg.delta_policy)

    # uniqueness screening at the initial profile: the implicit response
    # ratio must lie in (-1, 0) or the operator cannot participate
    excluded: list[int] = []
    for i in range(scn.n_ops):
        op = scn.operators[i]
        s0 = profile.others(i)
        br0 = best_response(op, scn, s0, delta=deltas[i])
        ratio = br_slope_at(op, scn, br0, s0, delta=deltas[i])
        if not (-1.0 + _EXCLUDE_MARGIN < ratio < -_EXCLUDE_MARGIN):
            excluded.append(i)
    active = [i for i in range(scn.n_ops) if i not in excluded]
    for i in excluded:
        betas[i] = 0.0
    n_active = len(active)

    trajectory = [profile_from_betas(scn, betas, cfg.delta_policy)]
    kappa_history: list[tuple[float, ...]] = []
    jac_history: list[JacobianEstimate] = []
    flags_history: list[dict] = []
    records: list[IterationRecord] = []
    verdict = Verdict.MAX_ITERS

    for t in range(1, cfg.max_iters + 1):
        profile = trajectory[-1]
        br_values = list(profile.betas)
        slopes = [0.0] * scn.n_ops
        implicit = [0.0] * scn.n_ops
        kappas = [1.0] * scn.n_ops
        fallbacks = [False] * scn.n_ops
        for i in active:
            op = scn.operators[i]
            others = sum(betas[j] for j in active if j != i)
            br_values[i] = float(best_response(op, scn, others, delta=deltas[i]))
            slopes[i] = float(jacobian_br(i, scn, profile, delta=deltas[i]))
            # the stationary-map ratio at the (clamped) response point; this
            # ignores box clipping, matching the uniqueness analysis
            implicit[i] = float(br_slope_at(op, scn, br_values[i], others,
                                            delta=deltas[i]))
            if cfg.mode is DynamicsMode.BEST_RESPONSE:
                kappas[i] = 1.0
            elif cfg.kappa_policy is KappaPolicy.FIXED:
                kappas[i] = cfg.kappa_value
            else:
                in_region = (n_active == 1 or
                             -1.0 / (n_active - 1) < slopes[i] < 0.0)
                if in_region:
                    kappas[i] = 1.0
                elif cfg.kappa_policy is KappaPolicy.DOMINANT_ZERO:
                    kappas[i] = 1.0 / ((n_active - 1) * abs(slopes[i]) + 1.0)
                else:
                    kb = kappa_bound(op, scn, profile, delta=deltas[i])
                    kappas[i] = float(kb.value)
                    fallbacks[i] = kb.used_fallback

        new_betas = list(betas)
        stepped = jp_step([betas[i] for i in active],
                          [br_values[i] for i in active],
                          [kappas[i] for i in active],
                          [boxes[i] for i in active])
        for i, b in zip(active, stepped):
            new_betas[i] = b

        jac = JacobianEstimate.assemble([slopes[i] for i in active],
                                        [kappas[i] for i in active])
        uniqueness_ok = all(-1.0 < implicit[i] < 0.0 for i in active)
        br_ok = all((n_active - 1) * abs(slopes[i]) < 1.0 for i in active)
        step_norm = max((abs(new_betas[i] - betas[i]) for i in active),
                        default=0.0)
        record = IterationRecord(
            iteration=t, betas=tuple(new_betas), br_values=tuple(br_values),
            kappas=tuple(kappas), br_slopes=tuple(slopes),
            implicit_slopes=tuple(implicit),
            step_norm=step_norm, uniqueness_ok=uniqueness_ok,
            br_contraction_ok=br_ok, kappa_fallbacks=tuple(fallbacks))
        records.append(record)
        kappa_history.append(tuple(kappas))
        jac_history.append(jac)
        flags_history.append({"uniqueness_ok": uniqueness_ok,
                              "br_contraction_ok": br_ok})
        if on_iteration is not None:
            on_iteration(record)

        betas = new_betas
        trajectory.append(profile_from_betas(scn, betas, cfg.delta_policy))

        if step_norm < cfg.tol:
            verdict = Verdict.CONVERGED
            break
        revisit = any(
            max(abs(betas[i] - past.betas[i]) for i in active) < cfg.oscillation_tol
            for past in trajectory[:-2])
        if revisit and n_active > 0:
            verdict = Verdict.OSCILLATING
            break

    final = trajectory[-1]
    withdrawn: list[int] = []
    if verdict is Verdict.CONVERGED:
        for i in active:
            op = scn.operators[i]
            base = op_mod.baseline_utility(op, scn)
            u_final = utility(op, models[i].rate_triple(final.betas[i],
                                                        final.total))
            if u_final < base.u_min - 1e-9:
                withdrawn.append(i)
        if withdrawn:
            verdict = Verdict.OPERATOR_WITHDREW

    return ConvergenceReport(
        verdict=verdict, final=final, trajectory=trajectory,
        kappa_history=kappa_history, jacobian_history=jac_history,
        condition_flags=flags_history, records=records,
        excluded=tuple(excluded), withdrawn=tuple(withdrawn))
