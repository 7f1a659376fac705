"""Acceptance suite: one test per shipped criterion, each printing a
PASS line with its runtime (run with -s to watch them)."""

import csv
import math
import time

import numpy as np
import pytest

from copss import operators as op_mod
from copss import stochgeom as sg
from copss.analysis import brute_force_ne, game_hessian
from copss.cli import ExperimentPreset, load_scenario, run_experiment
from copss.errors import InfeasibleError
from copss.game import (DynamicsConfig, DynamicsMode, Verdict, jacobian_br,
                        jp_step, pooled_eigen_condition, profile_from_betas,
                        run_dynamics)
from copss.operators import (BoxConstraint, SharingScheme, UtilityKind,
                             best_response, operator_model)

from conftest import make_scenario, paper_scenario_path, random_operator_draw


def _report(criterion, started, detail=""):
    elapsed = time.time() - started
    print(f"[criterion {criterion}] PASS ({elapsed:.1f}s) {detail}")
    return elapsed


@pytest.fixture(scope="module")
def paper_loaded():
    return load_scenario(paper_scenario_path())


@pytest.fixture(scope="module")
def paper_scn(paper_loaded):
    return paper_loaded.scenario


@pytest.fixture(scope="module")
def sweep_rows(paper_loaded, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    started = time.time()
    run_experiment(paper_loaded, out, preset=ExperimentPreset.DENSITY_SWEEP)
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    elapsed = time.time() - started
    assert elapsed < 30 * 60
    return rows


def _draw_scenario(rng, scheme, utility):
    for _ in range(50):
        kw = random_operator_draw(rng, scheme, utility)
        w_s = rng.uniform(0.0, 1.0)
        w_c = rng.uniform(0.0, 0.3) * (1.0 - w_s)
        kw["weights"] = (w_c, 1.0 - w_s - w_c, w_s)
        scn = make_scenario(op_kwargs=kw,
                            inter_x=rng.uniform(1.0, 6.0),
                            noise_dbm=rng.uniform(-76.0, -68.0))
        try:
            box = operator_model(scn, scn.operators[0]).box
        except InfeasibleError:
            continue
        if not box.clamped and box.hi - box.lo > 0.05:
            return scn
    raise RuntimeError("could not draw a feasible scenario")


def test_criterion_1_concavity_suite():
    started = time.time()
    rng = np.random.default_rng(101)
    from copss.game import br_slope_at
    for draw in range(50):
        for scheme in SharingScheme:
            for kind in UtilityKind:
                scn = _draw_scenario(rng, scheme, kind)
                op = scn.operators[0]
                model = operator_model(scn, op)
                box = model.box
                others = rng.uniform(0.0, 0.4)
                grid = np.linspace(box.lo, box.hi, 50)
                u = np.array([model.utility_value(b, others) for b in grid])
                second = u[:-2] - 2.0 * u[1:-1] + u[2:]
                assert second.max() <= 1e-9, (draw, scheme, kind, second.max())
                # concavity keeps the response ratio in the uniqueness range
                mid = 0.5 * (box.lo + box.hi)
                slope = br_slope_at(op, scn, mid, others)
                assert -1.0 < slope <= 1e-9, (draw, scheme, kind, slope)
                if op.w_s > 1e-6:
                    assert slope < 0.0
    assert _report(1, started, "concavity over 50 draws x 4 combos") < 120


def test_criterion_2_ascending_constraint_suite():
    started = time.time()
    rng = np.random.default_rng(202)
    for draw in range(20):
        for scheme in SharingScheme:
            kw = random_operator_draw(rng, scheme)
            scn = make_scenario(op_kwargs=kw,
                                inter_x=rng.uniform(1.0, 6.0),
                                noise_dbm=rng.uniform(-76.0, -68.0))
            op = scn.operators[0]
            feasible_seen = False
            last = -math.inf
            for delta in np.linspace(0.05, 1.0, 20):
                try:
                    hi = op_mod.beta_max(op, scn, float(delta))
                except InfeasibleError:
                    assert not feasible_seen, "feasibility must be monotone"
                    continue
                feasible_seen = True
                assert hi >= last - 1e-9, (draw, scheme, delta)
                last = hi
    assert _report(2, started, "beta_max ascending in delta") < 120


def test_criterion_3_pool_matrix_oracle_equivalence():
    started = time.time()
    rng = np.random.default_rng(303)
    checked = skipped = 0
    while checked < 1000:
        n = int(rng.integers(2, 9))
        slopes = rng.uniform(-1.0, 0.0, n)
        diag = rng.uniform(-0.5, 1.0, n)
        if np.any(slopes == 0.0):
            continue
        m = np.tile(slopes[:, None], (1, n))
        np.fill_diagonal(m, diag)
        eig_max = float(np.abs(np.linalg.eigvals(m)).max())
        d = diag - slopes
        total = float(np.sum(-slopes / (1.0 + d)))
        margin = min(abs(eig_max - 1.0), float(np.min(np.abs(np.abs(d) - 1.0))),
                     abs(total - 1.0))
        if margin <= 1e-6:
            skipped += 1
            continue
        assert pooled_eigen_condition(m) == (eig_max < 1.0)
        checked += 1
    assert _report(3, started, f"1000 matrices ({skipped} borderline skipped)") < 30


def test_criterion_4_jacobian_identity(paper_scn):
    started = time.time()
    rng = np.random.default_rng(404)
    ops = paper_scn.operators
    models = [operator_model(paper_scn, op) for op in ops]
    boxes = [m.box for m in models]
    n = paper_scn.n_ops
    for _ in range(10):
        betas = tuple(
            b.lo + (0.15 + 0.7 * rng.random()) * (b.hi - b.lo) for b in boxes)
        profile = profile_from_betas(paper_scn, betas)
        h_fd = game_hessian(paper_scn, profile)
        # analytic D(I - T) from the exact rate derivatives
        d = np.zeros((n, n))
        t = np.zeros((n, n))
        for i, model in enumerate(models):
            u_bb, u_bs = model.second_partials(betas[i], profile.others(i))
            d[i, i] = u_bb
            t[i, :] = -u_bs / u_bb
            t[i, i] = 0.0
        dit = d @ (np.eye(n) - t)
        assert np.all(np.abs(h_fd - dit) <= 1e-3 * np.abs(dit)), (
            np.max(np.abs(h_fd - dit) / np.abs(dit)))
    # implicit-function slope against directly differenced best responses
    for s in (0.05, 0.1, 0.15, 0.2, 0.25, 0.3):
        profile = profile_from_betas(paper_scn, (0.1, s / 2, s / 2))
        implicit = jacobian_br(0, paper_scn, profile)
        h = 1e-4
        direct = (best_response(ops[0], paper_scn, s + h)
                  - best_response(ops[0], paper_scn, s - h)) / (2.0 * h)
        assert implicit == pytest.approx(direct, abs=1e-3)
    assert _report(4, started, "H = D(I-T) and slope agreement") < 300


def test_criterion_5_convergence_reproduction(paper_scn):
    started = time.time()
    jp = run_dynamics(paper_scn, DynamicsConfig())
    assert jp.verdict is Verdict.CONVERGED

    nes = brute_force_ne(paper_scn, 200)
    assert len(nes) == 1
    grid_ne = nes[0]
    assert max(abs(a - b) for a, b in zip(jp.final.betas, grid_ne.betas)) <= 0.02
    assert all(abs(b - 0.12) <= 0.04 for b in grid_ne.betas)

    br = run_dynamics(paper_scn, DynamicsConfig(mode=DynamicsMode.BEST_RESPONSE,
                                                max_iters=60))
    assert br.verdict in (Verdict.OSCILLATING, Verdict.MAX_ITERS)
    for rec in br.records:
        assert all(slope < -0.5 for slope in rec.implicit_slopes)
    assert _report(
        5, started,
        f"JP->{[round(b, 4) for b in jp.final.betas]}, grid NE near "
        f"{round(grid_ne.betas[0], 4)}, BR {br.verdict.value}") < 600


def _column(rows, name):
    return [float(r[name]) for r in rows]


def test_criterion_6_density_sweep_trends(paper_scn, sweep_rows):
    started = time.time()
    rows = sweep_rows
    n = paper_scn.n_ops
    assert all(r["verdict"] == "converged" for r in rows)

    # (a) all gains at accepted equilibria at least 1
    for r in rows:
        for i in range(n):
            assert float(r[f"gain_{i + 1}"]) >= 1.0 - 1e-6

    by_combo = {}
    for r in rows:
        by_combo.setdefault((r["scheme"], r["utility"]), []).append(r)

    # (b) the operators' gains cross at the symmetric load point
    for combo, rs in by_combo.items():
        rs.sort(key=lambda r: float(r["lambda1_multiplier"]))
        mults = [float(r["lambda1_multiplier"]) for r in rs]
        step = mults[1] - mults[0]
        diffs = [float(r["gain_1"]) - float(r["gain_2"]) for r in rs]
        crossing = [m for m, d_lo, d_hi in
                    zip(mults[1:], diffs[:-1], diffs[1:])
                    if d_lo * d_hi <= 0.0]
        assert any(abs(m - 1.0) <= step + 1e-9 for m in crossing), combo

    # (c) above the crossing the loaded operator pins at its floor while
    # the others stay strictly inside; this is the share pattern of the
    # weighted-sum runs (the log utility reaches the floor further out,
    # and enters the shipped checks through the efficiency ordering)
    beta_min = paper_scn.operators[0].beta_min
    for combo, rs in by_combo.items():
        if combo[1] != "weighted_sum":
            continue
        for r in rs:
            if float(r["lambda1_multiplier"]) >= 1.2:
                assert float(r["beta_1"]) <= beta_min + 2e-3, combo
                assert float(r["beta_2"]) > beta_min + 5e-3, combo
                assert float(r["beta_3"]) > beta_min + 5e-3, combo

    # (d) underlay contributes more spectrum and gains less than overlay
    for util in ("weighted_sum", "proportional_fair"):
        over = {float(r["lambda1_multiplier"]): r for r in rows
                if r["scheme"] == "overlay" and r["utility"] == util}
        under = {float(r["lambda1_multiplier"]): r for r in rows
                 if r["scheme"] == "underlay" and r["utility"] == util}
        for m in over:
            for i in range(n):
                assert (float(under[m][f"beta_{i + 1}"])
                        >= float(over[m][f"beta_{i + 1}"]) - 1e-9)
                assert (float(under[m][f"gain_{i + 1}"])
                        <= float(over[m][f"gain_{i + 1}"]) + 1e-9)

    # (e) symmetric-point gain within the reported band
    sym = next(r for r in rows
               if r["scheme"] == "overlay" and r["utility"] == "weighted_sum"
               and abs(float(r["lambda1_multiplier"]) - 1.0) < 1e-9)
    gain = float(sym["gain_1"])
    assert 1.30 <= gain <= 1.60

    # high-load shares of the unloaded operators sit near the reported
    # levels (0.15 overlay, 0.34 underlay; wide band, see ledger)
    for scheme, target in (("overlay", 0.15), ("underlay", 0.34)):
        top = next(r for r in rows
                   if r["scheme"] == scheme and r["utility"] == "weighted_sum"
                   and abs(float(r["lambda1_multiplier"]) - 2.0) < 1e-9)
        assert float(top["beta_2"]) == pytest.approx(target, abs=0.1)
    _report(6, started, f"symmetric-point gain {gain:.3f}")


def test_criterion_7_efficiency_ordering(sweep_rows):
    started = time.time()
    psi_ws = [float(r["psi"]) for r in sweep_rows
              if r["utility"] == "weighted_sum"]
    psi_pf = [float(r["psi"]) for r in sweep_rows
              if r["utility"] == "proportional_fair"]
    assert all(0.0 < p <= 1.0 + 1e-9 for p in psi_ws + psi_pf)
    assert np.mean(psi_pf) >= np.mean(psi_ws)
    _report(7, started,
            f"mean psi PF {np.mean(psi_pf):.3f} >= WS {np.mean(psi_ws):.3f}")


def test_criterion_8_jp_reduces_to_br_bitwise():
    started = time.time()
    rng = np.random.default_rng(808)
    boxes = [BoxConstraint(0.01, 0.95)] * 4
    for _ in range(100):
        betas = tuple(rng.uniform(0.01, 0.95, 4))
        brs = tuple(rng.uniform(0.01, 0.95, 4))
        out = jp_step(betas, brs, (1.0,) * 4, boxes)
        assert all(a == b for a, b in zip(out, brs))
    assert _report(8, started, "kappa=1 update bitwise equals BR") < 10


def _mc_coverage(density, gamma, beta, sigma2, n_draws, seed):
    """PPP Monte-Carlo oracle for fixed-distance D2D coverage under
    Rayleigh fading: empirical P[h0 P l(d) > gamma (sigma2 beta + I)]."""
    model = sg.PathlossModel(40.0, 28.0)
    power, d = 0.01, 10.0
    eps, k = model.exponent, model.gain_at_1m
    rng = np.random.default_rng(seed)
    s_power = gamma / (k * d ** (-eps))  # = s * power
    sim_radius = max(
        (2.0 * math.pi * density * s_power * k
         / ((eps - 2.0) * 3e-5)) ** (1.0 / (eps - 2.0)),
        20.0 * d)
    mean_n = density * math.pi * sim_radius ** 2
    p_rx = power * k * d ** (-eps)
    threshold = gamma * sigma2 * beta
    success = 0
    done = 0
    while done < n_draws:
        m = int(min(max(2_000_000 // max(mean_n, 1.0), 1_000), n_draws - done))
        counts = rng.poisson(mean_n, m)
        total = int(counts.sum())
        radii = sim_radius * np.sqrt(rng.random(total))
        contrib = power * k * radii ** (-eps) * rng.standard_exponential(total)
        idx = np.repeat(np.arange(m), counts)
        interference = np.bincount(idx, weights=contrib, minlength=m)
        h0 = rng.standard_exponential(m)
        success += int(np.count_nonzero(
            h0 * p_rx > threshold + gamma * interference))
        done += m
    p = success / n_draws
    se = math.sqrt(max(p * (1.0 - p), 1e-12) / n_draws)
    return p, se


def test_criterion_9_monte_carlo_coverage():
    started = time.time()
    rng = np.random.default_rng(909)
    n_draws = 1_000_000
    model = sg.PathlossModel(40.0, 28.0)
    for case in range(5):
        density = float(rng.uniform(5e-6, 6e-5))
        gamma = float(rng.uniform(0.5, 6.0))
        beta = float(rng.uniform(0.3, 1.0))
        sigma2 = 10.0 ** ((rng.uniform(-75.0, -66.0) - 30.0) / 10.0)
        consts = sg.RadioConstants(noise_d2d=sigma2)
        quad = sg.coverage_probability(
            sg.LinkKind.INTRA_D2D, gamma, beta,
            [sg.InterferenceField(density, 0.01)], consts, model)
        mc, se = _mc_coverage(density, gamma, beta, sigma2, n_draws,
                              seed=1000 + case)
        assert abs(quad - mc) <= 3.0 * se, (case, quad, mc, se)
    assert _report(9, started, "5 scenarios within 3 standard errors") < 600


def test_criterion_10_determinism(paper_loaded, tmp_path):
    started = time.time()
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        run_experiment(paper_loaded, out, seed=123,
                       preset=ExperimentPreset.CONVERGENCE_TRACE)
    for name in ("trace_jp.csv", "trace_br.csv", "final_profile.csv",
                 "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    _report(10, started, "byte-identical outputs")
