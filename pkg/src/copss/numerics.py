"""Quadrature configuration and semi-infinite integration helpers.

Two integration routes are provided and deliberately kept apart:

* :func:`integrate_semi_infinite` wraps adaptive Gauss-Kronrod quadrature
  (QUADPACK) and is the accuracy-first route used by the link-level
  operations.
* :class:`SemiInfiniteRule` is a fixed composite Gauss-Legendre rule with
  geometrically growing panels.  Because its nodes never move, integrals
  evaluated with it are exactly smooth functions of any parameter of the
  integrand, which the optimization layers rely on.  Its accuracy is
  checked against the adaptive route in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import QuadratureError

__all__ = [
    "NumericsConfig",
    "integrate_semi_infinite",
    "SemiInfiniteRule",
]


@dataclass(frozen=True)
class NumericsConfig:
    """Tolerances for the numerical back end.

    rel_tol: target relative tolerance of adaptive quadratures.
    max_subdivisions: interval limit handed to the adaptive integrator.
    truncation_threshold: relative size below which integrand tails are
        dropped when fixed rules pick their upper cutoff.
    """

    rel_tol: float = 1e-8
    max_subdivisions: int = 200
    truncation_threshold: float = 1e-14

    def __post_init__(self) -> None:
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must be in (0, 1)")
        if self.max_subdivisions < 10:
            raise ValueError("max_subdivisions must be at least 10")
        if not 0 < self.truncation_threshold < 1e-3:
            raise ValueError("truncation_threshold must be tiny and positive")

    def tail_log(self) -> float:
        """|log| of the truncation threshold, used to place rule cutoffs."""
        return -math.log(self.truncation_threshold) + 10.0


def integrate_semi_infinite(func, cfg: NumericsConfig | None = None,
                            points=None) -> tuple[float, float]:
    """Integrate ``func`` over [0, inf) adaptively.

    Returns (value, abserr).  Raises :class:`QuadratureError` when the
    integrator reports it could not reach the requested tolerance.
    """
    cfg = cfg or NumericsConfig()
    if points:
        # QUADPACK cannot take break points together with an infinite limit,
        # so integrate the finite head and the tail separately.
        pts = sorted(p for p in points if p > 0 and math.isfinite(p))
        head, head_err = (0.0, 0.0)
        if pts:
            head, head_err = integrate.quad(
                func, 0.0, pts[-1], points=pts[:-1] or None,
                epsrel=cfg.rel_tol, epsabs=0.0, limit=cfg.max_subdivisions)
        lo = pts[-1] if pts else 0.0
        out = integrate.quad(func, lo, np.inf, epsrel=cfg.rel_tol,
                             epsabs=0.0, limit=cfg.max_subdivisions,
                             full_output=1)
        value, err = head + out[0], head_err + out[1]
    else:
        out = integrate.quad(func, 0.0, np.inf, epsrel=cfg.rel_tol,
                             epsabs=0.0, limit=cfg.max_subdivisions,
                             full_output=1)
        value, err = out[0], out[1]
    if len(out) > 3 and err > cfg.rel_tol * max(abs(value), 1e-300) * 10.0:
        raise QuadratureError("semi-infinite quadrature failed to converge",
                              achieved_tolerance=err)
    return value, err


class SemiInfiniteRule:
    """Fixed composite Gauss-Legendre rule on [0, cutoff].

    Panels start at ``first_edge`` and grow geometrically by ``ratio`` up
    to ``cutoff``; a leading panel covers [0, first_edge].  ``nodes`` and
    ``weights`` are flat arrays usable for vectorized integrand kernels.
    """

    def __init__(self, cutoff: float, first_edge: float = 1e-4,
                 ratio: float = math.sqrt(2.0), order: int = 32) -> None:
        if cutoff <= first_edge:
            cutoff = first_edge * 4.0
        edges = [0.0, first_edge]
        while edges[-1] < cutoff:
            edges.append(min(edges[-1] * ratio, cutoff))
        x, w = np.polynomial.legendre.leggauss(order)
        x = 0.5 * (x + 1.0)  # map to [0, 1]
        w = 0.5 * w
        lo = np.asarray(edges[:-1])
        hi = np.asarray(edges[1:])
        width = hi - lo
        self.nodes = (lo[:, None] + width[:, None] * x[None, :]).ravel()
        self.weights = (width[:, None] * w[None, :]).ravel()
        self.cutoff = float(edges[-1])

    def integrate(self, values: np.ndarray) -> float:
        """Sum integrand values sampled on ``self.nodes``."""
        return float(np.dot(self.weights, values))
