import importlib.resources
import math

import pytest

from copss import stochgeom as sg
from copss.cli import load_scenario
from copss.operators import (OperatorParams, Scenario, SharingScheme,
                             UtilityKind, normalized_weights)

BS_DENSITY = 2.0 / (math.sqrt(3.0) * 500.0 ** 2)


def paper_scenario_path():
    return importlib.resources.files("copss") / "data" / "paper_symmetric.toml"


@pytest.fixture(scope="session")
def paper_loaded():
    return load_scenario(paper_scenario_path())


@pytest.fixture(scope="session")
def paper_scn(paper_loaded):
    return paper_loaded.scenario


def make_operator(rng=None, *, bs_density=BS_DENSITY, cellular_x=5.0,
                  intra_x=5.0, weights=None, tau_c=0.1, tau_d=1.0,
                  beta_min=0.01, scheme=SharingScheme.OVERLAY,
                  utility=UtilityKind.WEIGHTED_SUM, inter_density=None,
                  n_ops=3):
    if weights is None:
        inter = inter_density if inter_density is not None else 3.75 * bs_density
        weights = normalized_weights(cellular_x * bs_density,
                                     intra_x * bs_density, inter, n_ops)
    return OperatorParams(
        bs_density=bs_density,
        cellular_density=cellular_x * bs_density,
        intra_d2d_density=intra_x * bs_density,
        weights=weights,
        tau_c=tau_c,
        tau_d=tau_d,
        beta_min=beta_min,
        scheme=scheme,
        utility=utility,
    )


def make_scenario(*, n_ops=3, q=1.0, inter_x=3.75, noise_dbm=-72.0,
                  op_kwargs=None, per_op_kwargs=None):
    """Small scenario factory for randomized tests; defaults mirror the
    bundled symmetric preset."""
    inter = inter_x * BS_DENSITY
    consts = sg.RadioConstants(noise_d2d=10.0 ** ((noise_dbm - 30.0) / 10.0))
    ops = []
    for i in range(n_ops):
        kw = dict(op_kwargs or {})
        if per_op_kwargs:
            kw.update(per_op_kwargs[i])
        kw.setdefault("inter_density", inter)
        kw.setdefault("n_ops", n_ops)
        ops.append(make_operator(**kw))
    return Scenario(operators=tuple(ops), inter_d2d_density=inter, q=q,
                    consts=consts)


def random_operator_draw(rng, scheme=SharingScheme.OVERLAY,
                         utility=UtilityKind.WEIGHTED_SUM):
    """Randomized but feasible operator parameters for property suites."""
    w_s = rng.uniform(0.05, 0.6)
    w_c = rng.uniform(0.0, 0.3) * (1.0 - w_s)
    w_d = 1.0 - w_s - w_c
    return dict(
        cellular_x=rng.uniform(3.0, 7.0),
        intra_x=rng.uniform(2.0, 8.0),
        weights=(w_c, w_d, w_s),
        tau_c=rng.uniform(0.02, 0.12),
        tau_d=rng.uniform(0.3, 1.2),
        scheme=scheme,
        utility=utility,
    )
