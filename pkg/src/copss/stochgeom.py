"""Link-level quantities for Poisson networks of cellular and D2D links.

All transmitters of a given class form independent Poisson point processes
and links undergo Rayleigh fading, so success probabilities factor into a
noise term and one Laplace-transform factor per interferer class.  The
radial integrals behind those transforms have hypergeometric closed forms
for power-law pathloss, which this module uses throughout; the adaptive
quadrature appears only in the outer SINR/distance integrals.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass

from scipy import special

from .errors import QuadratureError
from .numerics import NumericsConfig, integrate_semi_infinite

__all__ = [
    "LinkKind",
    "PathlossModel",
    "InterferenceField",
    "RadioConstants",
    "thermal_noise_w",
    "pathloss_gain",
    "radial_interference_integral",
    "laplace_interference",
    "coverage_probability",
    "spectral_efficiency",
    "cellular_load",
    "active_bs_probability",
    "cellular_activity_factor",
]


class LinkKind(enum.Enum):
    """Transmission mode of a link; selects pathloss, power and distance law."""

    CELLULAR = "cellular"
    INTRA_D2D = "intra_d2d"
    INTER_D2D = "inter_d2d"


@dataclass(frozen=True)
class PathlossModel:
    """Log-distance pathloss  L(r)[dB] = exponent_coeff * log10(r) + intercept.

    ``exponent_coeff`` must exceed 20 dB/decade (pathloss exponent > 2) or
    the interference integrals over an unbounded plane diverge.
    """

    exponent_coeff: float
    intercept: float

    def __post_init__(self) -> None:
        if not self.exponent_coeff > 20.0:
            raise ValueError(
                "exponent_coeff must exceed 20 dB/decade for convergent "
                f"interference integrals, got {self.exponent_coeff!r}")
        if not math.isfinite(self.intercept):
            raise ValueError("intercept must be finite")

    @property
    def exponent(self) -> float:
        """Linear pathloss exponent (gain decays as r**-exponent)."""
        return self.exponent_coeff / 10.0

    @property
    def gain_at_1m(self) -> float:
        return 10.0 ** (-self.intercept / 10.0)


@dataclass(frozen=True)
class InterferenceField:
    """One homogeneous PPP of interferers.

    ``exclusion_radius`` keeps a disc around the receiver interferer-free
    (0 for D2D classes).  ``tracks_serving_distance`` marks fields whose
    exclusion radius equals the serving-link distance, which is only known
    inside the coverage integral (out-of-cell cellular interferers).
    ``pathloss`` overrides the receiver-mode pathloss model for this
    field; cross-system device interference propagates device-to-device
    like rather than at the full BS antenna gain.
    """

    density: float
    power: float
    exclusion_radius: float = 0.0
    tracks_serving_distance: bool = False
    pathloss: "PathlossModel | None" = None

    def __post_init__(self) -> None:
        if self.density < 0:
            raise ValueError("density must be non-negative")
        if self.power <= 0:
            raise ValueError("power must be positive")
        if self.exclusion_radius < 0:
            raise ValueError("exclusion_radius must be non-negative")


def thermal_noise_w(bandwidth_hz: float, noise_figure_db: float = 0.0) -> float:
    """Thermal noise power in watts over ``bandwidth_hz`` (kT = -174 dBm/Hz)."""
    dbm = -174.0 + 10.0 * math.log10(bandwidth_hz) + noise_figure_db
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class RadioConstants:
    """Powers, the D2D link distance and per-class noise levels.

    ``noise_d2d`` is the noise power over the full band seen by D2D-mode
    receivers; cellular links default to the interference-limited regime
    (``noise_cellular = 0``).  Both are plain config fields so either
    choice can be overridden.  The inter-operator D2D power defaults to
    the intra-operator one.
    """

    d2d_distance: float = 10.0
    tx_power_cellular: float = 10.0 ** ((23.0 - 30.0) / 10.0)
    tx_power_d2d: float = 10.0 ** ((10.0 - 30.0) / 10.0)
    tx_power_inter: float | None = None
    noise_d2d: float = thermal_noise_w(10e6, 9.0)
    noise_cellular: float = 0.0

    def __post_init__(self) -> None:
        if self.d2d_distance <= 0:
            raise ValueError("d2d_distance must be positive")
        if self.tx_power_cellular <= 0 or self.tx_power_d2d <= 0:
            raise ValueError("transmit powers must be positive")
        if self.tx_power_inter is not None and self.tx_power_inter <= 0:
            raise ValueError("tx_power_inter must be positive when given")
        if self.noise_d2d < 0 or self.noise_cellular < 0:
            raise ValueError("noise powers must be non-negative")

    @property
    def inter_power(self) -> float:
        return self.tx_power_d2d if self.tx_power_inter is None else self.tx_power_inter

    def mode_power(self, kind: LinkKind) -> float:
        if kind is LinkKind.CELLULAR:
            return self.tx_power_cellular
        if kind is LinkKind.INTRA_D2D:
            return self.tx_power_d2d
        return self.inter_power

    def mode_noise(self, kind: LinkKind) -> float:
        return self.noise_cellular if kind is LinkKind.CELLULAR else self.noise_d2d

    def d2d_noise_scale(self, model: PathlossModel, power: float | None = None) -> float:
        """Received-power-to-noise ratio P*l(d)/sigma^2 of a D2D link.

        Returns ``inf`` in the noiseless limit.
        """
        p = self.tx_power_d2d if power is None else power
        if self.noise_d2d == 0:
            return math.inf
        return p * pathloss_gain(self.d2d_distance, model) / self.noise_d2d


def pathloss_gain(r: float, model: PathlossModel) -> float:
    """Linear power gain of the pathloss law at distance ``r`` meters."""
    if r <= 0:
        raise ValueError(f"distance must be positive, got {r!r}")
    db = model.exponent_coeff * math.log10(r) + model.intercept
    return 10.0 ** (-db / 10.0)


def radial_interference_integral(strength: float, model: PathlossModel,
                                 exclusion_radius: float = 0.0) -> float:
    """Exact value of  int_a^inf  x*l(r)/(1 + x*l(r)) * r dr.

    ``strength`` is x = s * P (SINR-scaled power); ``a`` the exclusion
    radius.  With l(r) = K r^-eps the integrand is r/(1 + r^eps/(xK)),
    which reduces to a Gauss hypergeometric for a > 0 and to the classic
    pi/(eps*sin(2*pi/eps)) form for a = 0.
    """
    if strength < 0:
        raise ValueError("strength must be non-negative")
    if strength == 0.0:
        return 0.0
    eps = model.exponent
    c = strength * model.gain_at_1m  # integrand is r/(1 + r^eps/c)
    if c == 0.0:  # denormal strength: integrand vanishes
        return 0.0
    nu = exclusion_radius ** eps / c if exclusion_radius > 0.0 else 0.0
    if nu == 0.0:  # includes underflow for denormal exclusion radii
        return c ** (2.0 / eps) * (math.pi / eps) / math.sin(2.0 * math.pi / eps)
    b = 1.0 - 2.0 / eps
    val = special.hyp2f1(1.0, b, b + 1.0, -1.0 / nu)
    return exclusion_radius ** 2 / (eps * nu * b) * float(val)


def laplace_interference(field: InterferenceField, s: float,
                         model: PathlossModel) -> float:
    """Laplace transform of the aggregate interference of one PPP field.

    Equals exp(-2*pi*density * int_a^inf [s P l(r)/(1+s P l(r))] r dr);
    1 when the field is empty or s = 0, and decreasing in both ``s`` and
    the field density.
    """
    if s < 0:
        raise ValueError("s must be non-negative")
    if field.density == 0.0 or s == 0.0:
        return 1.0
    radial = radial_interference_integral(s * field.power, model,
                                          field.exclusion_radius)
    return math.exp(-2.0 * math.pi * field.density * radial)


def _resolved_fields(fields, serving_distance: float):
    out = []
    for f in fields:
        if f.tracks_serving_distance:
            f = dataclasses.replace(f, exclusion_radius=serving_distance,
                                    tracks_serving_distance=False)
        out.append(f)
    return out


def coverage_probability(kind: LinkKind, gamma: float, beta_m: float, fields,
                         consts: RadioConstants, model: PathlossModel,
                         bs_density: float | None = None,
                         cfg: NumericsConfig | None = None) -> float:
    """Probability that the link SINR exceeds ``gamma`` under Rayleigh fading.

    ``beta_m`` is the band fraction the mode occupies, scaling the in-band
    noise.  D2D modes have a fixed link distance so the distance integral
    collapses; the cellular mode averages over the nearest-BS Rayleigh
    distance law and needs ``bs_density``.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if not 0.0 <= beta_m <= 1.0:
        raise ValueError("beta_m must lie in [0, 1]")
    if gamma == 0.0:
        return 1.0
    sigma2 = consts.mode_noise(kind)
    power = consts.mode_power(kind)

    def success(distance: float) -> float:
        s = gamma / (power * pathloss_gain(distance, model))
        value = math.exp(-sigma2 * beta_m * s)
        for f in _resolved_fields(fields, distance):
            value *= laplace_interference(f, s, f.pathloss or model)
        return value

    if kind is not LinkKind.CELLULAR:
        return success(consts.d2d_distance)

    if bs_density is None or bs_density <= 0:
        raise ValueError("cellular coverage needs a positive bs_density")
    lam = bs_density

    def integrand(distance: float) -> float:
        pdf = 2.0 * math.pi * lam * distance * math.exp(-math.pi * lam * distance ** 2)
        return pdf * success(distance)

    cfg = cfg or NumericsConfig()
    value, _ = integrate_semi_infinite(integrand, cfg)
    return min(1.0, max(0.0, value))


def spectral_efficiency(kind: LinkKind, beta_m: float, activity: float, fields,
                        consts: RadioConstants, model: PathlossModel,
                        bs_density: float | None = None,
                        cfg: NumericsConfig | None = None) -> float:
    """Average spectral efficiency  activity * int_0^inf P(gamma)/(1+gamma) dgamma.

    ``activity`` is the fraction of time the typical user transmits; the
    result is linear in it.  Raises :class:`QuadratureError` when the
    adaptive quadrature cannot reach the configured tolerance.
    """
    if not 0.0 <= activity <= 1.0:
        raise ValueError("activity must lie in [0, 1]")
    if activity == 0.0:
        return 0.0
    cfg = cfg or NumericsConfig()

    def integrand(gamma: float) -> float:
        p = coverage_probability(kind, gamma, beta_m, fields, consts, model,
                                 bs_density, cfg)
        return p / (1.0 + gamma)

    value, err = integrate_semi_infinite(integrand, cfg)
    if not math.isfinite(value):
        raise QuadratureError("spectral efficiency integral diverged",
                              achieved_tolerance=err)
    return activity * value


def cellular_load(bs_density: float, cellular_density: float,
                  intra_d2d_density: float, inter_d2d_density: float,
                  delta: float, q: float, n_ops: int) -> float:
    """Density of users an operator must serve in cellular mode.

    Cellular users plus the intra-D2D and (equal) inter-D2D shares that
    mode selection leaves on the infrastructure.
    """
    if bs_density <= 0:
        raise ValueError("bs_density must be positive")
    if not 0.0 <= delta <= 1.0 or not 0.0 <= q <= 1.0:
        raise ValueError("delta and q must lie in [0, 1]")
    return (cellular_density + (1.0 - delta) * intra_d2d_density
            + (1.0 - q) * inter_d2d_density / n_ops)


def active_bs_probability(bs_density: float, cellular_density: float,
                          intra_d2d_density: float, inter_d2d_density: float,
                          delta: float, q: float, n_ops: int) -> float:
    """Probability a base station has at least one cellular-mode user.

    Standard PPP cell-load approximation 1 - (1 + u/(3.5*lambda_b))^-3.5
    with u the cellular-mode user density; decreasing in delta and q.
    """
    u = cellular_load(bs_density, cellular_density, intra_d2d_density,
                      inter_d2d_density, delta, q, n_ops)
    return 1.0 - (1.0 + u / (3.5 * bs_density)) ** (-3.5)


def cellular_activity_factor(bs_density: float, cellular_density: float,
                             intra_d2d_density: float, inter_d2d_density: float,
                             delta: float, q: float, n_ops: int) -> float:
    """Round-robin time share of a typical cellular-mode user, min(1, a*lb/u).

    Degenerate no-load case returns 1 (a lone user is always scheduled).
    """
    u = cellular_load(bs_density, cellular_density, intra_d2d_density,
                      inter_d2d_density, delta, q, n_ops)
    if u == 0.0:
        return 1.0
    alpha = active_bs_probability(bs_density, cellular_density,
                                  intra_d2d_density, inter_d2d_density,
                                  delta, q, n_ops)
    return min(1.0, alpha * bs_density / u)
