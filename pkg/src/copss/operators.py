"""Per-operator model: spectrum splits, rate triples, utilities, box
constraints and the one-dimensional best response.

An operator slices its licensed band into a cellular piece, an intra-D2D
piece (or one shared cellular+D2D piece under the underlay scheme) and a
contribution ``beta_i`` to the inter-operator pool.  Rate targets for
cellular and intra-D2D users convert into a box constraint
``beta_min <= beta_i <= beta_max(delta)``; inside the box the utility is
concave in ``beta_i``, so the best response is a scalar concave search.

Rates are evaluated on fixed Gauss-Legendre rules built once per
(scenario, operator, delta, q) so that every rate, and hence every
utility, is an exactly smooth function of the band fractions.  The rules
are validated against the adaptive-quadrature route in the test suite.
"""

from __future__ import annotations

import enum
import functools
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import stochgeom as sg
from .errors import InfeasibleError, NonConcaveError
from .numerics import NumericsConfig, SemiInfiniteRule

__all__ = [
    "SharingScheme",
    "UtilityKind",
    "OperatorParams",
    "Scenario",
    "RateTriple",
    "BoxConstraint",
    "BaselineResult",
    "normalized_weights",
    "rate_model",
    "interference_fields",
    "rate_triple",
    "utility",
    "utility_given",
    "constraint_values",
    "beta_max",
    "box_constraint",
    "best_response",
    "baseline_utility",
]

_ROOT_TOL = 1e-8        # bisection tolerance for band-fraction roots
_GOLDEN_TOL = 1e-7      # golden-section interval width
_DERIV_TOL = 1e-5       # |dU/dbeta| bound certifying an interior maximum


class SharingScheme(enum.Enum):
    """How intra-D2D links use the operator's own band."""

    OVERLAY = "overlay"      # dedicated slices: beta_cd = beta_c + beta_d
    UNDERLAY = "underlay"    # one shared slice beta_cd for both user types


class UtilityKind(enum.Enum):
    WEIGHTED_SUM = "weighted_sum"
    PROPORTIONAL_FAIR = "proportional_fair"


@dataclass(frozen=True)
class OperatorParams:
    """Static description of one operator.

    Densities are per square meter.  ``weights`` is (w_c, w_d, w_s), all
    non-negative summing to one; the utility itself uses w_s against
    1 - w_s while the full triple enters the performance-gain ratio.
    ``delta_baseline`` is the intra-D2D mode fraction used when sharing
    is off (defaults to the top of ``delta_range``).
    """

    bs_density: float
    cellular_density: float
    intra_d2d_density: float
    weights: tuple[float, float, float]
    tau_c: float
    tau_d: float
    beta_min: float = 0.01
    delta_range: tuple[float, float] = (0.0, 1.0)
    delta_baseline: float | None = None
    scheme: SharingScheme = SharingScheme.OVERLAY
    utility: UtilityKind = UtilityKind.WEIGHTED_SUM

    def __post_init__(self) -> None:
        if self.bs_density <= 0:
            raise ValueError("bs_density must be positive")
        if self.cellular_density < 0 or self.intra_d2d_density < 0:
            raise ValueError("user densities must be non-negative")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be three non-negative numbers")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must sum to one")
        if self.tau_c < 0 or self.tau_d < 0:
            raise ValueError("rate targets must be non-negative")
        if not 0.0 < self.beta_min < 1.0:
            raise ValueError("beta_min must lie in (0, 1)")
        lo, hi = self.delta_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("delta_range must satisfy 0 <= lo <= hi <= 1")
        if self.delta_baseline is not None and not 0.0 <= self.delta_baseline <= 1.0:
            raise ValueError("delta_baseline must lie in [0, 1]")

    @property
    def w_s(self) -> float:
        return self.weights[2]

    @property
    def delta_max(self) -> float:
        return self.delta_range[1]

    @property
    def delta_for_baseline(self) -> float:
        return self.delta_max if self.delta_baseline is None else self.delta_baseline


@dataclass(frozen=True)
class Scenario:
    """One game instance: operators plus the shared radio environment."""

    operators: tuple[OperatorParams, ...]
    inter_d2d_density: float
    q: float
    consts: sg.RadioConstants = field(default_factory=sg.RadioConstants)
    pathloss_cellular: sg.PathlossModel = sg.PathlossModel(37.6, 15.3)
    pathloss_d2d: sg.PathlossModel = sg.PathlossModel(40.0, 28.0)
    numerics: NumericsConfig = NumericsConfig()

    def __post_init__(self) -> None:
        if len(self.operators) < 1:
            raise ValueError("a scenario needs at least one operator")
        if self.inter_d2d_density < 0:
            raise ValueError("inter_d2d_density must be non-negative")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("q must lie in [0, 1]")
        object.__setattr__(self, "operators", tuple(self.operators))

    @property
    def n_ops(self) -> int:
        return len(self.operators)

    def pathloss(self, kind: sg.LinkKind) -> sg.PathlossModel:
        return (self.pathloss_cellular if kind is sg.LinkKind.CELLULAR
                else self.pathloss_d2d)

    def op_index(self, op: OperatorParams) -> int:
        return self.operators.index(op)


@dataclass(frozen=True)
class RateTriple:
    """Normalized average user rates (band fraction x spectral efficiency)."""

    q_c: float
    q_d: float
    q_s: float

    def __post_init__(self) -> None:
        if min(self.q_c, self.q_d, self.q_s) < 0:
            raise ValueError("rates must be non-negative")


@dataclass(frozen=True)
class BoxConstraint:
    """Feasible interval for an operator's pool contribution."""

    lo: float
    hi: float
    clamped: bool = False

    @property
    def empty(self) -> bool:
        return self.lo > self.hi

    def clamp(self, x: float) -> float:
        return min(max(x, self.lo), self.hi)


@dataclass(frozen=True)
class BaselineResult:
    """Operator performance with sharing switched off (beta = 0, q = 0)."""

    u_min: float
    q_c: float
    q_d: float


def normalized_weights(cellular_density: float, intra_d2d_density: float,
                       inter_d2d_density: float, n_ops: int) -> tuple[float, float, float]:
    """Weights proportional to the user densities (lam_c, lam_d, lam/N)."""
    parts = (cellular_density, intra_d2d_density, inter_d2d_density / n_ops)
    total = sum(parts)
    if total <= 0:
        raise ValueError("cannot normalize all-zero densities")
    return tuple(p / total for p in parts)


def interference_fields(scn: Scenario, op: OperatorParams, kind: sg.LinkKind,
                        delta: float, q: float) -> list[sg.InterferenceField]:
    """Interferer populations seen by a typical receiver of ``kind``.

    Out-of-cell cellular interferers are excluded inside the serving
    distance; D2D interferers have no exclusion.  Underlay adds the
    cross-type interferers on the shared slice.
    """
    alpha = sg.active_bs_probability(
        op.bs_density, op.cellular_density, op.intra_d2d_density,
        scn.inter_d2d_density, delta, q, scn.n_ops)
    consts = scn.consts
    if kind is sg.LinkKind.CELLULAR:
        fields = [sg.InterferenceField(alpha * op.bs_density,
                                       consts.tx_power_cellular,
                                       tracks_serving_distance=True)]
        if op.scheme is SharingScheme.UNDERLAY:
            fields.append(sg.InterferenceField(delta * op.intra_d2d_density,
                                               consts.tx_power_d2d,
                                               pathloss=scn.pathloss_d2d))
        return fields
    if kind is sg.LinkKind.INTRA_D2D:
        fields = [sg.InterferenceField(delta * op.intra_d2d_density,
                                       consts.tx_power_d2d)]
        if op.scheme is SharingScheme.UNDERLAY:
            fields.append(sg.InterferenceField(alpha * op.bs_density,
                                               consts.tx_power_cellular))
        return fields
    return [sg.InterferenceField(q * scn.inter_d2d_density, consts.inter_power)]


def _shape_constant(eps: float) -> float:
    """pi/(eps*sin(2*pi/eps)), the zero-exclusion radial integral shape."""
    return (math.pi / eps) / math.sin(2.0 * math.pi / eps)


class _D2DKernel:
    """Fixed-rule evaluator of R(x) = int exp(-x*g/eta) K(g) dg and its
    x-derivatives, where K folds the interference Laplace factors and the
    1/(1+gamma) rate weight of a fixed-distance D2D link."""

    def __init__(self, decay_coeffs, decay_power: float, eta: float,
                 cfg: NumericsConfig) -> None:
        self.eta = eta
        total_decay = sum(decay_coeffs)
        log_tail = cfg.tail_log()
        cutoffs = []
        if total_decay > 0:
            cutoffs.append((log_tail / total_decay) ** (1.0 / decay_power))
        if math.isfinite(eta):
            cutoffs.append(log_tail * eta / 1e-4)  # keeps x >= 1e-4 accurate
        if not cutoffs:
            raise InfeasibleError(
                "D2D rate diverges: no interference and no noise")
        rule = SemiInfiniteRule(min(min(cutoffs), 1e18), ratio=2.0)
        g = rule.nodes
        damping = np.exp(-total_decay * g ** decay_power) if total_decay > 0 else 1.0
        self._g = g
        self._wk = rule.weights * damping / (1.0 + g)

    def rate(self, x: float, order: int = 0) -> float:
        """d^order/dx^order of the average spectral efficiency at fraction x."""
        if not math.isfinite(self.eta):
            return float(self._wk.sum()) if order == 0 else 0.0
        expo = np.exp(-(x / self.eta) * self._g)
        if order:
            expo = expo * (-self._g / self.eta) ** order
        return float(np.dot(self._wk, expo))


class _LinkRates:
    """All link rates of one operator at fixed (delta, q), memoized.

    The memo is the spectral-efficiency cache keyed by (kind, beta_m,
    order); it is lock-protected and, because the underlying rules are
    fixed, cached and recomputed values agree bit-for-bit.
    """

    def __init__(self, scn: Scenario, op: OperatorParams, delta: float,
                 q: float) -> None:
        self.scn = scn
        self.op = op
        self.delta = delta
        self.q = q
        self.alpha = sg.active_bs_probability(
            op.bs_density, op.cellular_density, op.intra_d2d_density,
            scn.inter_d2d_density, delta, q, scn.n_ops)
        self.nu_c = sg.cellular_activity_factor(
            op.bs_density, op.cellular_density, op.intra_d2d_density,
            scn.inter_d2d_density, delta, q, scn.n_ops)
        consts = scn.consts
        d2d = scn.pathloss_d2d
        self.eta_intra = consts.d2d_noise_scale(d2d, consts.tx_power_d2d)
        self.eta_inter = consts.d2d_noise_scale(d2d, consts.inter_power)
        self._memo: dict = {}
        self._lock = threading.Lock()
        self._intra_kernel: _D2DKernel | None = None
        self._inter_kernel: _D2DKernel | None = None
        self._se_cell: float | None = None

    # -- kernel construction -------------------------------------------------

    def _d2d_decay(self, density: float, power_ratio: float) -> float:
        """Coefficient A with Laplace factor exp(-A * gamma^(2/eps))."""
        d2d = self.scn.pathloss_d2d
        eps = d2d.exponent
        d = self.scn.consts.d2d_distance
        return (2.0 * math.pi * density * _shape_constant(eps)
                * d ** 2 * power_ratio ** (2.0 / eps))

    def _build_intra(self) -> _D2DKernel:
        consts = self.scn.consts
        coeffs = [self._d2d_decay(self.delta * self.op.intra_d2d_density, 1.0)]
        if self.op.scheme is SharingScheme.UNDERLAY:
            coeffs.append(self._d2d_decay(
                self.alpha * self.op.bs_density,
                consts.tx_power_cellular / consts.tx_power_d2d))
        return _D2DKernel(coeffs, 2.0 / self.scn.pathloss_d2d.exponent,
                          self.eta_intra, self.scn.numerics)

    def _build_inter(self) -> _D2DKernel:
        coeffs = [self._d2d_decay(self.q * self.scn.inter_d2d_density, 1.0)]
        return _D2DKernel(coeffs, 2.0 / self.scn.pathloss_d2d.exponent,
                          self.eta_inter, self.scn.numerics)

    def _build_se_cell(self) -> float:
        """Cellular spectral efficiency in the interference-limited regime.

        The nearest-BS distance integral collapses in closed form because
        every Laplace exponent scales with the squared serving distance,
        leaving a single SINR integral with an algebraic tail handled by
        an explicit power-law correction.
        """
        if self.scn.consts.noise_cellular != 0.0:
            raise NotImplementedError  # callers route to the noisy path
        cell = self.scn.pathloss_cellular
        eps_c = cell.exponent
        consts = self.scn.consts
        lam_b = self.op.bs_density
        rule = SemiInfiniteRule(1e10, ratio=2.0)
        g = rule.nodes
        b = 1.0 - 2.0 / eps_c
        from scipy import special
        # Out-of-cell field, excluded inside the serving distance; its
        # Laplace exponent is 2*pi*alpha*lam_b * A_cc(g) * D^2.
        a_cc = g * special.hyp2f1(1.0, b, b + 1.0, -g) / (eps_c * b)
        terms = [(2.0 * math.pi * self.alpha * lam_b * a_cc, 2.0)]
        if self.op.scheme is SharingScheme.UNDERLAY:
            # same-band D2D interferers at the BS, device-plane pathloss
            f_model = self.scn.pathloss_d2d
            eps_f = f_model.exponent
            ratio = (consts.tx_power_d2d / consts.tx_power_cellular
                     * f_model.gain_at_1m / cell.gain_at_1m)
            coef = (2.0 * math.pi * self.delta * self.op.intra_d2d_density
                    * _shape_constant(eps_f) * (ratio * g) ** (2.0 / eps_f))
            terms.append((coef, 2.0 * eps_c / eps_f))
        if all(p == 2.0 for _, p in terms):
            load = sum(c for c, _ in terms) / (math.pi * lam_b)
            vals = 1.0 / ((1.0 + g) * (1.0 + load))
        else:
            # mixed distance powers: fixed Gauss-Legendre distance rule
            sigma_d = 1.0 / math.sqrt(math.pi * lam_b)
            edges = np.array([0.0, 0.5, 1.0, 2.0, 3.5, 6.0]) * sigma_d
            xg, wg = np.polynomial.legendre.leggauss(48)
            width = edges[1:] - edges[:-1]
            nodes = (edges[:-1, None] + width[:, None] * 0.5 * (xg + 1.0)).ravel()
            wts = (width[:, None] * 0.5 * wg[None, :]).ravel()
            pdf = 2.0 * math.pi * lam_b * nodes * np.exp(-math.pi * lam_b * nodes ** 2)
            expo = np.zeros((g.size, nodes.size))
            for coef, p in terms:
                expo += np.asarray(coef)[:, None] * (nodes ** p)[None, :]
            vals = (np.exp(-expo) * (pdf * wts)[None, :]).sum(axis=1) / (1.0 + g)
        # algebraic SINR tail beyond the cutoff, from the measured log-slope
        slope = (math.log(vals[-33] / vals[-1])
                 / math.log(rule.nodes[-33] / rule.nodes[-1]))
        tail = vals[-1] * rule.cutoff / max(-slope - 1.0, 0.2)
        return float(rule.integrate(vals) + tail)

    # -- public rate surface -------------------------------------------------

    def rate(self, kind: sg.LinkKind, beta_m: float, order: int = 0) -> float:
        key = (kind, beta_m, order)
        with self._lock:
            if key in self._memo:
                return self._memo[key]
        value = self._compute(kind, beta_m, order)
        with self._lock:
            self._memo.setdefault(key, value)
        return value

    def _compute(self, kind: sg.LinkKind, beta_m: float, order: int) -> float:
        if kind is sg.LinkKind.CELLULAR:
            if self.scn.consts.noise_cellular == 0.0:
                if self._se_cell is None:
                    self._se_cell = self._build_se_cell()
                return self.nu_c * self._se_cell if order == 0 else 0.0
            return self._noisy_cell(beta_m, order)
        if kind is sg.LinkKind.INTRA_D2D:
            if self._intra_kernel is None:
                self._intra_kernel = self._build_intra()
            return self._intra_kernel.rate(beta_m, order)
        if self._inter_kernel is None:
            self._inter_kernel = self._build_inter()
        return self._inter_kernel.rate(beta_m, order)

    def _noisy_cell(self, beta_m: float, order: int) -> float:
        """Adaptive-quadrature fallback when cellular noise is enabled."""
        if order:
            h = 1e-4 * max(beta_m, 0.1)
            hi = self._noisy_cell(min(beta_m + h, 1.0), order - 1)
            lo = self._noisy_cell(max(beta_m - h, 0.0), order - 1)
            return (hi - lo) / (2.0 * h)
        fields = interference_fields(self.scn, self.op, sg.LinkKind.CELLULAR,
                                     self.delta, self.q)
        return sg.spectral_efficiency(
            sg.LinkKind.CELLULAR, beta_m, self.nu_c, fields, self.scn.consts,
            self.scn.pathloss_cellular, self.op.bs_density, self.scn.numerics)

    # -- band-scaled rate terms and derivatives ------------------------------

    def scaled(self, kind: sg.LinkKind, x: float, order: int = 0) -> float:
        """d^order/dx^order of x * R_kind(x); the pool/slice rate terms."""
        if x == 0.0 and order == 0:
            return 0.0
        r = functools.partial(self.rate, kind)
        if order == 0:
            return x * r(x)
        if order == 1:
            return r(x) + x * r(x, 1)
        if order == 2:
            return 2.0 * r(x, 1) + x * r(x, 2)
        raise ValueError("order must be 0, 1 or 2")

    def pool_curvature_bound(self, beta_total: float) -> float:
        """Upper bound on |d^2(beta*R_s)/dbeta^2| with the interference
        Laplace factor dropped: |int exp(-g*b/eta)(b*g-2*eta)*g/(1+g) dg|/eta^2.

        Infinite (unusable) in the noiseless limit.
        """
        eta = self.eta_inter
        if not math.isfinite(eta):
            return math.inf
        b = beta_total

        def integrand(g: float) -> float:
            return math.exp(-g * b / eta) * (b * g - 2.0 * eta) * g / (1.0 + g)

        from scipy import integrate
        split = 2.0 * eta / b if b > 0 else None
        if split:
            head, _ = integrate.quad(integrand, 0.0, split, limit=200)
            tail, _ = integrate.quad(integrand, split, np.inf, limit=200)
            raw = head + tail
        else:
            raw, _ = integrate.quad(integrand, 0.0, np.inf, limit=200)
        return abs(raw) / eta ** 2


@functools.lru_cache(maxsize=512)
def rate_model(scn: Scenario, op: OperatorParams, delta: float,
               q: float) -> _LinkRates:
    """Memoized per-(scenario, operator, delta, q) rate model."""
    return _LinkRates(scn, op, delta, q)


# ---------------------------------------------------------------------------
# Band split and box constraint
# ---------------------------------------------------------------------------


def _bisect_root(h, target: float, what: str, tol: float = _ROOT_TOL) -> float:
    """Smallest x in [0, 1] with h(x) = target, h increasing, h(0) = 0."""
    if target <= 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    if h(hi) < target:
        raise InfeasibleError(
            f"{what} target {target!r} unreachable even with the whole band")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if h(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class OperatorModel:
    """Split rule, box constraint and utility of one operator at fixed
    (delta, q).  Instances are cheap views over the cached rate model."""

    def __init__(self, scn: Scenario, op: OperatorParams, delta: float | None = None,
                 q: float | None = None) -> None:
        self.scn = scn
        self.op = op
        self.delta = op.delta_max if delta is None else delta
        self.q = scn.q if q is None else q
        lo, hi = op.delta_range
        if not lo - 1e-12 <= self.delta <= hi + 1e-12:
            raise ValueError(f"delta {self.delta!r} outside delta_range {op.delta_range!r}")
        self.rates = rate_model(scn, op, self.delta, self.q)
        self._mins: tuple | None = None

    # -- constraint roots ----------------------------------------------------

    def _min_fractions(self) -> tuple:
        """(beta_c_min, beta_d_min, own_band_min): smallest slices meeting
        the rate targets. Overlay stacks the two dedicated slices; underlay
        reuses one shared slice, so the larger root binds."""
        if self._mins is not None:
            return self._mins
        op, rates = self.op, self.rates
        bc = _bisect_root(lambda x: rates.scaled(sg.LinkKind.CELLULAR, x),
                          op.tau_c, "cellular rate")
        if self.delta == 0.0 and op.tau_d > 0.0:
            raise InfeasibleError("intra-D2D rate target with no D2D-mode users")
        bd = 0.0 if op.tau_d == 0.0 else _bisect_root(
            lambda x: self.delta * rates.scaled(sg.LinkKind.INTRA_D2D, x),
            op.tau_d, "intra-D2D rate")
        own = bc + bd if op.scheme is SharingScheme.OVERLAY else max(bc, bd)
        self._mins = (bc, bd, own)
        return self._mins

    @property
    def beta_c_min(self) -> float:
        return self._min_fractions()[0]

    @property
    def beta_d_min(self) -> float:
        return self._min_fractions()[1]

    @property
    def own_band_min(self) -> float:
        """Minimum own-band fraction: beta_c_min + beta_d_min (overlay) or
        beta_cd_min (underlay)."""
        return self._min_fractions()[2]

    @property
    def beta_max_raw(self) -> float:
        return 1.0 - self.own_band_min

    @property
    def box(self) -> BoxConstraint:
        hi = self.beta_max_raw
        if hi < self.op.beta_min:
            return BoxConstraint(self.op.beta_min, self.op.beta_min, clamped=True)
        return BoxConstraint(self.op.beta_min, hi)

    # -- split and rates -----------------------------------------------------

    def split(self, beta_i: float) -> tuple[float, float]:
        """(beta_c, beta_d) for overlay; (beta_cd, beta_cd) for underlay."""
        if beta_i < 0 or beta_i > 1:
            raise ValueError("beta_i must lie in [0, 1]")
        if beta_i > self.beta_max_raw + 1e-9:
            raise InfeasibleError(
                f"pool share {beta_i!r} leaves less than the minimum own band "
                f"{self.own_band_min!r}")
        if self.op.scheme is SharingScheme.OVERLAY:
            beta_c = self.beta_c_min
            return beta_c, 1.0 - beta_i - beta_c
        beta_cd = 1.0 - beta_i
        return beta_cd, beta_cd

    def rate_triple(self, beta_i: float, beta_total: float) -> RateTriple:
        if beta_total < beta_i - 1e-12:
            raise ValueError("beta_total cannot be below beta_i")
        rates, delta, q = self.rates, self.delta, self.q
        pool = q * rates.scaled(sg.LinkKind.INTER_D2D, beta_total) if (
            q > 0.0 and beta_total > 0.0) else 0.0
        if self.op.scheme is SharingScheme.OVERLAY:
            beta_c, beta_d = self.split(beta_i)
            q_c = rates.scaled(sg.LinkKind.CELLULAR, beta_c)
            own_d = rates.scaled(sg.LinkKind.INTRA_D2D, beta_d)
        else:
            beta_cd, _ = self.split(beta_i)
            q_c = rates.scaled(sg.LinkKind.CELLULAR, beta_cd)
            own_d = rates.scaled(sg.LinkKind.INTRA_D2D, beta_cd)
        q_d = q_c * (1.0 - delta) + delta * own_d
        q_s = q_c * (1.0 - q) + pool
        return RateTriple(q_c, q_d, q_s)

    def constraint_values(self, beta_i: float) -> tuple[float, float]:
        rates, delta = self.rates, self.delta
        beta_c, beta_d = self.split(beta_i)  # both equal beta_cd for underlay
        h_c = rates.scaled(sg.LinkKind.CELLULAR, beta_c)
        h_d = delta * rates.scaled(sg.LinkKind.INTRA_D2D, beta_d)
        return h_c, h_d

    # -- utility and derivatives ---------------------------------------------

    def _dq_terms(self, beta_i: float, beta_others: float):
        """First and second derivatives of (q_d, q_s) in own beta and in the
        opponents' aggregate.  The pool term depends on beta_i and the
        aggregate only through their sum, so the mixed and pure pool
        curvatures coincide."""
        rates, delta, q = self.rates, self.delta, self.q
        total = beta_i + beta_others
        g1 = q * rates.scaled(sg.LinkKind.INTER_D2D, total, 1) if q > 0 else 0.0
        g2 = q * rates.scaled(sg.LinkKind.INTER_D2D, total, 2) if q > 0 else 0.0
        if self.op.scheme is SharingScheme.OVERLAY:
            _, beta_d = self.split(beta_i)
            f1 = delta * rates.scaled(sg.LinkKind.INTRA_D2D, beta_d, 1)
            f2 = delta * rates.scaled(sg.LinkKind.INTRA_D2D, beta_d, 2)
            dq_d, d2q_d = -f1, f2
            dq_s_db, dq_s_ds = g1, g1
        else:
            beta_cd, _ = self.split(beta_i)
            r_c = rates.rate(sg.LinkKind.CELLULAR, beta_cd)
            f1 = delta * rates.scaled(sg.LinkKind.INTRA_D2D, beta_cd, 1)
            f2 = delta * rates.scaled(sg.LinkKind.INTRA_D2D, beta_cd, 2)
            dq_d, d2q_d = -((1.0 - delta) * r_c + f1), f2
            dq_s_db, dq_s_ds = -(1.0 - q) * r_c + g1, g1
        return dq_d, d2q_d, dq_s_db, dq_s_ds, g2

    def utility_value(self, beta_i: float, beta_others: float) -> float:
        return utility(self.op, self.rate_triple(beta_i, beta_i + beta_others))

    def utility_derivative(self, beta_i: float, beta_others: float) -> float:
        w_s = self.op.w_s
        dq_d, _, dq_s_db, _, _ = self._dq_terms(beta_i, beta_others)
        if self.op.utility is UtilityKind.WEIGHTED_SUM:
            return (1.0 - w_s) * dq_d + w_s * dq_s_db
        triple = self.rate_triple(beta_i, beta_i + beta_others)
        return (1.0 - w_s) * dq_d / triple.q_d + w_s * dq_s_db / triple.q_s

    def second_partials(self, beta_i: float, beta_others: float) -> tuple[float, float]:
        """(d2U/dbeta_i^2, d2U/dbeta_i dbeta_j) from the analytic rate
        derivatives; used to cross-validate the finite-difference route."""
        w_s = self.op.w_s
        dq_d, d2q_d, dq_s_db, dq_s_ds, g2 = self._dq_terms(beta_i, beta_others)
        if self.op.utility is UtilityKind.WEIGHTED_SUM:
            u_bb = (1.0 - w_s) * d2q_d + w_s * g2
            u_bs = w_s * g2
            return u_bb, u_bs
        triple = self.rate_triple(beta_i, beta_i + beta_others)
        term_d = (d2q_d * triple.q_d - dq_d ** 2) / triple.q_d ** 2
        u_bb = ((1.0 - w_s) * term_d
                + w_s * (g2 * triple.q_s - dq_s_db ** 2) / triple.q_s ** 2)
        u_bs = w_s * (g2 * triple.q_s - dq_s_db * dq_s_ds) / triple.q_s ** 2
        return u_bb, u_bs

    def analytic_derivatives_available(self) -> bool:
        return self.scn.consts.noise_cellular == 0.0


@functools.lru_cache(maxsize=2048)
def operator_model(scn: Scenario, op: OperatorParams, delta: float | None = None,
                   q: float | None = None) -> OperatorModel:
    return OperatorModel(scn, op, delta, q)


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------


def rate_triple(op: OperatorParams, scn: Scenario, beta_i: float,
                delta_i: float, beta_total: float) -> RateTriple:
    """Average rates of the operator's cellular, intra- and inter-D2D users."""
    return operator_model(scn, op, delta_i).rate_triple(beta_i, beta_total)


def utility(op: OperatorParams, rates: RateTriple) -> float:
    """Operator utility over its D2D-relevant rates.

    Weighted sum:  (1-w_s) q_d + w_s q_s;  proportional fair replaces the
    rates by their logarithms, which requires them to be positive.
    """
    w_s = op.w_s
    if op.utility is UtilityKind.WEIGHTED_SUM:
        return (1.0 - w_s) * rates.q_d + w_s * rates.q_s
    for name, value in (("q_d", rates.q_d), ("q_s", rates.q_s)):
        if value <= 0.0:
            raise ValueError(
                f"proportional-fair utility undefined: rate {name} = {value!r}")
    return (1.0 - w_s) * math.log(rates.q_d) + w_s * math.log(rates.q_s)


def utility_given(op: OperatorParams, scn: Scenario, beta_i: float,
                  beta_others: float, delta: float | None = None) -> float:
    """Utility at own share ``beta_i`` against the opponents' aggregate."""
    return operator_model(scn, op, delta).utility_value(beta_i, beta_others)


def constraint_values(op: OperatorParams, scn: Scenario, beta_i: float,
                      delta_i: float) -> tuple[float, float]:
    """(h_c, h_d): cellular and intra-D2D constraint-function values."""
    return operator_model(scn, op, delta_i).constraint_values(beta_i)


def box_constraint(op: OperatorParams, scn: Scenario, delta_i: float | None = None,
                   q: float | None = None) -> BoxConstraint:
    return operator_model(scn, op, delta_i, q).box


def beta_max(op: OperatorParams, scn: Scenario, delta_i: float | None = None,
             q: float | None = None) -> float:
    """Upper limit of the pool-share box at mode fraction ``delta_i``.

    Clamps to ``beta_min`` (flagged on the box) when the rate targets eat
    the whole band; raises :class:`InfeasibleError` when they cannot be
    met at all.
    """
    return operator_model(scn, op, delta_i, q).box.hi


def _golden_section(f, lo: float, hi: float, tol: float = _GOLDEN_TOL):
    """Maximize a unimodal f on [lo, hi]; returns (x, f(x), samples)."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    samples = []

    def probe(x: float) -> float:
        y = f(x)
        samples.append((x, y))
        return y

    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = probe(c), probe(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = probe(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = probe(d)
    x = c if fc > fd else d
    fx = max(fc, fd)
    return x, fx, samples


def best_response(op: OperatorParams, scn: Scenario, beta_others: float,
                  delta: float | None = None, q: float | None = None,
                  objective=None, box: tuple[float, float] | None = None) -> float:
    """Utility-maximizing pool share against the opponents' aggregate.

    Golden-section search over the box (width 1e-7), followed by a
    derivative polish for interior maximizers so |dU/dbeta| < 1e-5 there.
    ``objective``/``box`` allow injecting a test utility in place of the
    operator's own.  Flat maxima resolve to the smallest maximizer.
    """
    if beta_others < 0:
        raise ValueError("beta_others must be non-negative")
    if objective is not None:
        lo, hi = box if box is not None else (op.beta_min, 1.0)
        x, fx, _ = _golden_section(objective, lo, hi)
        if objective(lo) >= fx - 1e-12 * max(1.0, abs(fx)):
            return lo
        return min(max(x, lo), hi)

    model = operator_model(scn, op, delta, q)
    b = model.box
    if b.clamped:
        raise InfeasibleError("operator box is empty: rate targets leave no "
                              "room for a pool contribution")
    if b.hi - b.lo < _GOLDEN_TOL:
        return b.lo

    f = lambda x: model.utility_value(x, beta_others)
    x, fx, samples = _golden_section(f, b.lo, b.hi)

    if model.analytic_derivatives_available():
        dlo = model.utility_derivative(b.lo, beta_others)
        dhi = model.utility_derivative(b.hi, beta_others)
        if dlo < 0.0 and dhi > 0.0:
            raise NonConcaveError(
                "utility cannot be concave: derivative increases across the box",
                samples)
        if dlo <= 0.0:
            return b.lo
        if dhi >= 0.0:
            return b.hi
        root = optimize.brentq(
            lambda t: model.utility_derivative(t, beta_others),
            b.lo, b.hi, xtol=1e-12)
        return b.clamp(root)

    if f(b.lo) >= fx - 1e-12 * max(1.0, abs(fx)):
        return b.lo
    return b.clamp(x)


def baseline_utility(op: OperatorParams, scn: Scenario) -> BaselineResult:
    """Utility and rates with sharing off: beta = 0, q = 0, delta at its
    no-sharing value.  Raises if the rate targets are infeasible there,
    which contradicts the feasibility assumption on target selection."""
    model = operator_model(scn, op, op.delta_for_baseline, 0.0)
    if model.box.clamped and model.beta_max_raw < 0.0:
        raise InfeasibleError("rate targets infeasible even without sharing")
    triple = model.rate_triple(0.0, 0.0)
    h_c, h_d = model.constraint_values(0.0)
    if h_c < op.tau_c - 1e-9 or h_d < op.tau_d - 1e-9:
        raise InfeasibleError(
            f"no-sharing constraints violated: h_c={h_c!r}, h_d={h_d!r}")
    return BaselineResult(utility(op, triple), triple.q_c, triple.q_d)
