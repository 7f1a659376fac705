"""Scenario files, experiment presets and the command-line interface.

Scenario documents are TOML with explicit units (densities per square
meter or in units of the BS density, powers in dBm, distances in
meters).  Unknown keys are rejected.  Experiments write CSV files plus a
JSON manifest recording the configuration hash, the seed and every
modeling decision in force; outputs are byte-reproducible for a fixed
scenario file and seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import enum
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

try:  # stdlib on 3.11+, backport otherwise
    import tomllib as tomli
except ModuleNotFoundError:  # pragma: no cover
    import tomli

from . import __version__
from . import analysis as an
from . import game as gm
from . import operators as op_mod
from . import stochgeom as sg
from .errors import CopssError, ScenarioFormatError
from .game import DynamicsConfig, DynamicsMode, KappaPolicy, Verdict
from .numerics import NumericsConfig
from .operators import (OperatorParams, Scenario, SharingScheme, UtilityKind,
                        normalized_weights)

__all__ = [
    "ExperimentPreset",
    "ExperimentSpec",
    "LoadedScenario",
    "load_scenario",
    "loads_scenario",
    "serialize_scenario",
    "run_experiment",
    "cli_main",
    "main",
]

log = logging.getLogger("copss")

_HEX_AREA = math.sqrt(3.0) / 2.0  # hexagon area = sqrt(3)/2 * ISD^2


class ExperimentPreset(enum.Enum):
    CONVERGENCE_TRACE = "convergence_trace"
    DENSITY_SWEEP = "density_sweep"
    UTILITY_SURFACE = "utility_surface"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ExperimentSpec:
    preset: ExperimentPreset = ExperimentPreset.CUSTOM
    sweep_from: float = 0.2
    sweep_to: float = 2.0
    sweep_steps: int = 10
    surface_points: int = 25


@dataclass(frozen=True)
class LoadedScenario:
    scenario: Scenario
    dynamics: DynamicsConfig
    experiment: ExperimentSpec
    weight_modes: tuple[str | None, ...]  # "density_normalized" or None


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _dbm_to_w(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def _w_to_dbm(w: float) -> float:
    return 10.0 * math.log10(w) + 30.0


class _Section:
    """A TOML table wrapper that tracks consumed keys and units."""

    def __init__(self, data: dict, path: str) -> None:
        if not isinstance(data, dict):
            raise ScenarioFormatError(f"{path} must be a table")
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def take(self, key: str, kind, unit: str, required: bool = True,
             default=None):
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ScenarioFormatError(
                    f"missing field {self.path}.{key} ({unit})")
            return default
        value = self.data[key]
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind is str and isinstance(value, str):
            return value
        if kind is list and isinstance(value, list):
            return value
        raise ScenarioFormatError(
            f"field {self.path}.{key} must be {kind.__name__} ({unit})")

    def sub(self, key: str, required: bool = True) -> "_Section | None":
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ScenarioFormatError(f"missing table [{self.path}.{key}]")
            return None
        return _Section(self.data[key], f"{self.path}.{key}")

    def finish(self) -> None:
        unknown = set(self.data) - self.seen
        if unknown:
            raise ScenarioFormatError(
                f"unknown key(s) in {self.path}: {sorted(unknown)}")


def _density(section: _Section, stem: str, bs_density: float | None,
             required: bool = True) -> float | None:
    per_m2 = section.take(f"{stem}_per_m2", float, "per m^2", required=False)
    per_bs = section.take(f"{stem}_per_bs", float, "x BS density", required=False)
    if per_m2 is not None and per_bs is not None:
        raise ScenarioFormatError(
            f"{section.path}: give exactly one of {stem}_per_m2 / {stem}_per_bs")
    if per_m2 is not None:
        return per_m2
    if per_bs is not None:
        if bs_density is None:
            raise ScenarioFormatError(
                f"{section.path}.{stem}_per_bs needs a BS density")
        return per_bs * bs_density
    if required:
        raise ScenarioFormatError(
            f"missing field {section.path}.{stem}_per_m2 (per m^2) or "
            f"{stem}_per_bs (x BS density)")
    return None


def _parse_pathloss(sec: _Section) -> sg.PathlossModel:
    model = sg.PathlossModel(
        sec.take("exponent_coeff_db", float, "dB per decade"),
        sec.take("intercept_db", float, "dB"))
    sec.finish()
    return model


def _parse_operator(sec: _Section, scn_ctx: dict):
    isd = sec.take("isd_m", float, "m", required=False)
    bs = _density(sec, "bs_density", None, required=False)
    if (isd is None) == (bs is None):
        raise ScenarioFormatError(
            f"{sec.path}: give exactly one of isd_m (m) / bs_density_per_m2")
    if bs is None:
        bs = 1.0 / (_HEX_AREA * isd ** 2)
    cellular = _density(sec, "cellular_density", bs)
    intra = _density(sec, "intra_d2d_density", bs)
    weights_raw = sec.data.get("weights")
    sec.seen.add("weights")
    mode = None
    if isinstance(weights_raw, str):
        if weights_raw != "density_normalized":
            raise ScenarioFormatError(
                f"{sec.path}.weights: unknown mode {weights_raw!r}")
        mode = weights_raw
        weights = normalized_weights(cellular, intra,
                                     scn_ctx["inter_density"], scn_ctx["n_ops"])
    elif isinstance(weights_raw, list) and len(weights_raw) == 3:
        weights = tuple(float(w) for w in weights_raw)
    else:
        raise ScenarioFormatError(
            f"{sec.path}.weights must be [w_c, w_d, w_s] or "
            f"\"density_normalized\"")
    scheme = sec.take("scheme", str, "overlay|underlay")
    utility = sec.take("utility", str, "weighted_sum|proportional_fair")
    try:
        scheme_e = SharingScheme(scheme)
        utility_e = UtilityKind(utility)
    except ValueError as exc:
        raise ScenarioFormatError(f"{sec.path}: {exc}") from None
    try:
        op = OperatorParams(
            bs_density=bs,
            cellular_density=cellular,
            intra_d2d_density=intra,
            weights=weights,
            tau_c=sec.take("rate_target_cellular", float, "nats/sym x fraction"),
            tau_d=sec.take("rate_target_intra_d2d", float, "nats/sym x fraction"),
            beta_min=sec.take("beta_min", float, "fraction"),
            delta_range=(sec.take("delta_min", float, "fraction", required=False,
                                  default=0.0),
                         sec.take("delta_max", float, "fraction")),
            delta_baseline=sec.take("delta_baseline", float, "fraction",
                                    required=False),
            scheme=scheme_e,
            utility=utility_e,
        )
    except ValueError as exc:
        raise ScenarioFormatError(f"{sec.path}: {exc}") from None
    sec.finish()
    return op, mode


def _parse_dynamics(sec: _Section | None) -> DynamicsConfig:
    if sec is None:
        return DynamicsConfig()
    mode = sec.take("mode", str, "jp|br", required=False, default="jp")
    policy_raw = sec.take("kappa_policy", str, "paper|dominant|fixed:<x>",
                          required=False, default="paper")
    kappa_value = 1.0
    if policy_raw.startswith("fixed:"):
        policy = KappaPolicy.FIXED
        kappa_value = float(policy_raw.split(":", 1)[1])
    else:
        try:
            policy = KappaPolicy(policy_raw)
        except ValueError:
            raise ScenarioFormatError(
                f"{sec.path}.kappa_policy: unknown policy {policy_raw!r}") from None
    init = sec.take("init", str, "beta_min|midpoint|random",
                    required=False, default="beta_min")
    try:
        cfg = DynamicsConfig(
            mode=DynamicsMode(mode),
            init=init,
            tol=sec.take("tol", float, "inf-norm step", required=False,
                         default=1e-6),
            max_iters=sec.take("max_iters", int, "count", required=False,
                               default=500),
            kappa_policy=policy,
            kappa_value=kappa_value,
            delta_policy=sec.take("delta_policy", str, "max|baseline",
                                  required=False, default="max"),
            seed=sec.take("seed", int, "RNG seed", required=False, default=0),
        )
    except ValueError as exc:
        raise ScenarioFormatError(f"{sec.path}: {exc}") from None
    sec.finish()
    return cfg


def _parse_experiment(sec: _Section | None) -> ExperimentSpec:
    if sec is None:
        return ExperimentSpec()
    preset_raw = sec.take("preset", str, "experiment preset")
    try:
        preset = ExperimentPreset(preset_raw)
    except ValueError:
        raise ScenarioFormatError(
            f"{sec.path}.preset: unknown preset {preset_raw!r}") from None
    spec = ExperimentSpec(
        preset=preset,
        sweep_from=sec.take("sweep_from", float, "density multiplier",
                            required=False, default=0.2),
        sweep_to=sec.take("sweep_to", float, "density multiplier",
                          required=False, default=2.0),
        sweep_steps=sec.take("sweep_steps", int, "count", required=False,
                             default=10),
        surface_points=sec.take("surface_points", int, "count",
                                required=False, default=25),
    )
    sec.finish()
    return spec


def _parse_numerics(sec: _Section | None) -> NumericsConfig:
    if sec is None:
        return NumericsConfig()
    cfg = NumericsConfig(
        rel_tol=sec.take("rel_tol", float, "relative", required=False,
                         default=1e-8),
        max_subdivisions=sec.take("max_subdivisions", int, "count",
                                  required=False, default=200),
        truncation_threshold=sec.take("truncation_threshold", float,
                                      "relative", required=False,
                                      default=1e-14))
    sec.finish()
    return cfg


def loads_scenario(text: str) -> LoadedScenario:
    """Parse a scenario document from a TOML string."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioFormatError(f"not valid TOML: {exc}") from None
    root = _Section(doc, "root")
    scn_sec = root.sub("scenario")
    dyn = _parse_dynamics(root.sub("dynamics", required=False))
    exp = _parse_experiment(root.sub("experiment", required=False))
    numerics = _parse_numerics(root.sub("numerics", required=False))
    root.finish()

    radio = scn_sec.sub("radio")
    noise_d2d_dbm = radio.take("noise_d2d_dbm", float, "dBm over full band")
    noise_cell_dbm = radio.take("noise_cellular_dbm", float,
                                "dBm over full band", required=False)
    tx_inter = radio.take("tx_power_inter_dbm", float, "dBm", required=False)
    consts = sg.RadioConstants(
        d2d_distance=radio.take("d2d_distance_m", float, "m"),
        tx_power_cellular=_dbm_to_w(radio.take("tx_power_cellular_dbm",
                                               float, "dBm")),
        tx_power_d2d=_dbm_to_w(radio.take("tx_power_d2d_dbm", float, "dBm")),
        tx_power_inter=None if tx_inter is None else _dbm_to_w(tx_inter),
        noise_d2d=_dbm_to_w(noise_d2d_dbm),
        noise_cellular=0.0 if noise_cell_dbm is None else _dbm_to_w(noise_cell_dbm),
    )
    radio.finish()

    pl = scn_sec.sub("pathloss")
    pl_cell = _parse_pathloss(pl.sub("cellular"))
    pl_d2d = _parse_pathloss(pl.sub("d2d"))
    pl.finish()

    ops_raw = scn_sec.data.get("operators")
    scn_sec.seen.add("operators")
    if not isinstance(ops_raw, list) or not ops_raw:
        raise ScenarioFormatError(
            "missing [[scenario.operators]] tables (at least one operator)")

    # the inter-D2D density may be quoted in units of the first operator's
    # BS density, so resolve that operator's density scale first
    probe = _Section(dict(ops_raw[0]), "scenario.operators[0]")
    isd = probe.take("isd_m", float, "m", required=False)
    bs0 = _density(probe, "bs_density", None, required=False)
    if bs0 is None and isd is not None:
        bs0 = 1.0 / (_HEX_AREA * isd ** 2)
    q = scn_sec.take("q", float, "fraction in [0,1]")
    inter_density = _density(scn_sec, "inter_d2d_density", bs0)
    scn_ctx = {"inter_density": inter_density, "n_ops": len(ops_raw)}

    operators, modes = [], []
    for i, raw in enumerate(ops_raw):
        op, mode = _parse_operator(_Section(raw, f"scenario.operators[{i}]"),
                                   scn_ctx)
        operators.append(op)
        modes.append(mode)
    scn_sec.finish()

    try:
        scenario = Scenario(
            operators=tuple(operators),
            inter_d2d_density=inter_density,
            q=q,
            consts=consts,
            pathloss_cellular=pl_cell,
            pathloss_d2d=pl_d2d,
            numerics=numerics,
        )
    except ValueError as exc:
        raise ScenarioFormatError(str(exc)) from None
    return LoadedScenario(scenario, dyn, exp, tuple(modes))


def load_scenario(path) -> LoadedScenario:
    """Load and validate a scenario file (TOML)."""
    p = Path(path)
    if not p.exists():
        raise ScenarioFormatError(f"scenario file not found: {p}")
    return loads_scenario(p.read_text())


def serialize_scenario(loaded: LoadedScenario) -> str:
    """Emit a scenario document that round-trips through the loader."""
    scn, dyn, exp = loaded.scenario, loaded.dynamics, loaded.experiment
    out = io.StringIO()
    w = out.write
    w("# copss scenario (generated; densities per m^2, powers dBm, distances m)\n")
    w("[scenario]\n")
    w(f"q = {scn.q!r}\n")
    w(f"inter_d2d_density_per_m2 = {scn.inter_d2d_density!r}\n\n")
    w("[scenario.radio]\n")
    c = scn.consts
    w(f"d2d_distance_m = {c.d2d_distance!r}\n")
    w(f"tx_power_cellular_dbm = {_w_to_dbm(c.tx_power_cellular)!r}\n")
    w(f"tx_power_d2d_dbm = {_w_to_dbm(c.tx_power_d2d)!r}\n")
    if c.tx_power_inter is not None:
        w(f"tx_power_inter_dbm = {_w_to_dbm(c.tx_power_inter)!r}\n")
    w(f"noise_d2d_dbm = {_w_to_dbm(c.noise_d2d)!r}\n")
    if c.noise_cellular > 0:
        w(f"noise_cellular_dbm = {_w_to_dbm(c.noise_cellular)!r}\n")
    for name, model in (("cellular", scn.pathloss_cellular),
                        ("d2d", scn.pathloss_d2d)):
        w(f"\n[scenario.pathloss.{name}]\n")
        w(f"exponent_coeff_db = {model.exponent_coeff!r}\n")
        w(f"intercept_db = {model.intercept!r}\n")
    for op, mode in zip(scn.operators, loaded.weight_modes):
        w("\n[[scenario.operators]]\n")
        w(f"bs_density_per_m2 = {op.bs_density!r}\n")
        w(f"cellular_density_per_m2 = {op.cellular_density!r}\n")
        w(f"intra_d2d_density_per_m2 = {op.intra_d2d_density!r}\n")
        if mode == "density_normalized":
            w('weights = "density_normalized"\n')
        else:
            w(f"weights = [{op.weights[0]!r}, {op.weights[1]!r}, {op.weights[2]!r}]\n")
        w(f"rate_target_cellular = {op.tau_c!r}\n")
        w(f"rate_target_intra_d2d = {op.tau_d!r}\n")
        w(f"beta_min = {op.beta_min!r}\n")
        w(f"delta_min = {op.delta_range[0]!r}\n")
        w(f"delta_max = {op.delta_range[1]!r}\n")
        if op.delta_baseline is not None:
            w(f"delta_baseline = {op.delta_baseline!r}\n")
        w(f'scheme = "{op.scheme.value}"\n')
        w(f'utility = "{op.utility.value}"\n')
    w("\n[dynamics]\n")
    w(f'mode = "{dyn.mode.value}"\n')
    w(f'init = "{dyn.init}"\n' if isinstance(dyn.init, str) else "")
    w(f"tol = {dyn.tol!r}\n")
    w(f"max_iters = {dyn.max_iters!r}\n")
    if dyn.kappa_policy is KappaPolicy.FIXED:
        w(f'kappa_policy = "fixed:{dyn.kappa_value!r}"\n')
    else:
        w(f'kappa_policy = "{dyn.kappa_policy.value}"\n')
    w(f'delta_policy = "{dyn.delta_policy}"\n')
    w(f"seed = {dyn.seed!r}\n")
    w("\n[experiment]\n")
    w(f'preset = "{exp.preset.value}"\n')
    w(f"sweep_from = {exp.sweep_from!r}\n")
    w(f"sweep_to = {exp.sweep_to!r}\n")
    w(f"sweep_steps = {exp.sweep_steps!r}\n")
    w(f"surface_points = {exp.surface_points!r}\n")
    n = scn.numerics
    w("\n[numerics]\n")
    w(f"rel_tol = {n.rel_tol!r}\n")
    w(f"max_subdivisions = {n.max_subdivisions!r}\n")
    w(f"truncation_threshold = {n.truncation_threshold!r}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(float(x))  # plain-float repr even for numpy scalars
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _trace_rows(report: gm.ConvergenceReport, n: int):
    for r in report.records:
        row = [r.iteration]
        row += [r.betas[i] for i in range(n)]
        row += [r.br_values[i] for i in range(n)]
        row += [r.kappas[i] for i in range(n)]
        row += [r.br_slopes[i] for i in range(n)]
        row += [r.implicit_slopes[i] for i in range(n)]
        row += [r.step_norm, r.uniqueness_ok, r.br_contraction_ok]
        yield row


def _trace_header(n: int):
    """Trace columns: beta_i are post-update pool shares (band fractions),
    br_i the raw best responses, kappa_i the smoothing weights, jbr_i the
    boundary-aware response derivatives, jimplicit_i the stationary-map
    ratios (all dimensionless); flags are 0/1."""
    cols = ["iteration"]
    for stem in ("beta", "br", "kappa", "jbr", "jimplicit"):
        cols += [f"{stem}_{i + 1}" for i in range(n)]
    cols += ["step_norm", "uniqueness_ok", "br_contraction_ok"]
    return cols


def _profile_rows(profile: gm.StrategyProfile):
    for i, (b, d) in enumerate(zip(profile.betas, profile.deltas)):
        yield [i + 1, b, d]


def design_decisions(loaded: LoadedScenario) -> dict:
    """Every modeling decision in force, for the run manifest."""
    scn, dyn = loaded.scenario, loaded.dynamics
    c = scn.consts
    return {
        "active_bs_probability": "1-(1+u/(3.5*lambda_b))**-3.5",
        "cellular_activity_factor": "min(1, alpha*lambda_b/u)",
        "cellular_load": "lambda_c+(1-delta)*lambda_d+(1-q)*lambda/N",
        "sigma2_cellular_w": c.noise_cellular,
        "sigma2_d2d_w": c.noise_d2d,
        "inter_power_equals_d2d": c.tx_power_inter is None,
        "bs_density_from_isd": "2/(sqrt(3)*isd^2)",
        "cross_system_interference_pathloss": "d2d_model",
        "cellular_distance_law": "nearest_bs_rayleigh",
        "cellular_exclusion": "serving_distance",
        "quad_rel_tol": scn.numerics.rel_tol,
        "quad_max_subdivisions": scn.numerics.max_subdivisions,
        "tail_truncation_threshold": scn.numerics.truncation_threshold,
        "root_bisection_tol": op_mod._ROOT_TOL,
        "golden_section_width": op_mod._GOLDEN_TOL,
        "derivative_tolerance": op_mod._DERIV_TOL,
        "fd_step_first_rel": 1e-4,
        "fd_step_second_rel": 1e-3,
        "kappa_policy": dyn.kappa_policy.value,
        "kappa_safety_factor": gm._KAPPA_SAFETY,
        "kappa_recomputed_each_iteration": True,
        "convergence_tol": dyn.tol,
        "max_iters": dyn.max_iters,
        "oscillation_tol": dyn.oscillation_tol,
        "delta_policy": dyn.delta_policy,
        "init": dyn.init if isinstance(dyn.init, str) else list(dyn.init),
        "br_tie_break": "smallest_maximizer",
        "boundary_br_slope": 0.0,
        "welfare_multistart": 20,
    }


def _manifest(loaded: LoadedScenario, seed: int, extra: dict) -> dict:
    text = serialize_scenario(loaded)
    return {
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "library_version": __version__,
        "seed": seed,
        "design_decisions": design_decisions(loaded),
        **extra,
    }


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True,
                               default=float) + "\n")


def _run_trace(loaded: LoadedScenario, out_dir: Path, seed: int) -> dict:
    """Run both update modes and write their iteration traces; the plain
    best-response run is capped at 60 iterations since a divergent trace
    repeats after a handful of steps."""
    scn = loaded.scenario
    n = scn.n_ops
    summaries = {}
    for mode in (DynamicsMode.JACOBI_PLAY, DynamicsMode.BEST_RESPONSE):
        cfg = dataclasses.replace(loaded.dynamics, mode=mode, seed=seed)
        if mode is DynamicsMode.BEST_RESPONSE:
            cfg = dataclasses.replace(cfg, max_iters=min(cfg.max_iters, 60))
        report = gm.run_dynamics(scn, cfg)
        name = "jp" if mode is DynamicsMode.JACOBI_PLAY else "br"
        _write_csv(out_dir / f"trace_{name}.csv", _trace_header(n),
                   _trace_rows(report, n))
        summaries[name] = {
            "verdict": report.verdict.value,
            "iterations": report.iterations,
            "final_betas": list(report.final.betas),
            "excluded": list(report.excluded),
        }
        if mode is DynamicsMode.JACOBI_PLAY:
            _write_csv(out_dir / "final_profile.csv",
                       ["operator", "beta", "delta"],
                       _profile_rows(report.final))
    return summaries


def _sweep_multipliers(spec: ExperimentSpec):
    k = spec.sweep_steps
    if k <= 0:
        return []
    if k == 1:
        return [spec.sweep_from]
    step = (spec.sweep_to - spec.sweep_from) / (k - 1)
    return [spec.sweep_from + i * step for i in range(k)]


def scenario_with_density(loaded: LoadedScenario, op_index: int,
                          multiplier: float, scheme: SharingScheme,
                          utility: UtilityKind) -> Scenario:
    """Sweep variant: scale one operator's intra-D2D density, switch the
    scheme/utility of all operators, and track weights with the density
    (explicit weights rescale their w_d share; normalized weights are
    recomputed from the densities)."""
    scn = loaded.scenario
    ops = []
    for i, op in enumerate(scn.operators):
        dens = op.intra_d2d_density * (multiplier if i == op_index else 1.0)
        if loaded.weight_modes[i] == "density_normalized":
            weights = normalized_weights(op.cellular_density, dens,
                                         scn.inter_d2d_density, scn.n_ops)
        elif i == op_index:
            w_c, w_d, w_s = op.weights
            w_d = w_d * multiplier
            total = w_c + w_d + w_s
            weights = (w_c / total, w_d / total, w_s / total)
        else:
            weights = op.weights
        ops.append(dataclasses.replace(op, intra_d2d_density=dens,
                                       weights=weights, scheme=scheme,
                                       utility=utility))
    return dataclasses.replace(scn, operators=tuple(ops))


def _sweep_point(args):
    loaded, multiplier, scheme_v, utility_v, seed = args
    scheme = SharingScheme(scheme_v)
    utility = UtilityKind(utility_v)
    scn = scenario_with_density(loaded, 0, multiplier, scheme, utility)
    cfg = dataclasses.replace(loaded.dynamics, seed=seed)
    row: list = [multiplier, scn.operators[0].intra_d2d_density,
                 scheme.value, utility.value]
    try:
        report = gm.run_dynamics(scn, cfg)
        gains = [an.performance_gain(op, scn, report.final)
                 for op in scn.operators]
        wr = an.social_welfare_opt(scn, report.final, seed=seed)
        row += [report.verdict.value]
        row += list(report.final.betas)
        row += gains
        row += [wr.psi]
    except CopssError as exc:
        log.warning("sweep point %s/%s/%s failed: %s", multiplier,
                    scheme.value, utility.value, exc)
        n = loaded.scenario.n_ops
        row += ["infeasible"] + [math.nan] * (2 * n + 1)
    return row


def _run_sweep(loaded: LoadedScenario, out_dir: Path, seed: int,
               workers: int = 1) -> dict:
    # columns: multiplier (x the base intra-D2D density), absolute density
    # per m^2, scheme/utility tags, verdict, equilibrium shares (band
    # fractions), per-operator weighted-rate gains over no sharing
    # (ratios), and the welfare efficiency ratio psi in (0, 1]
    n = loaded.scenario.n_ops
    header = (["lambda1_multiplier", "lambda1_per_m2", "scheme", "utility",
               "verdict"]
              + [f"beta_{i + 1}" for i in range(n)]
              + [f"gain_{i + 1}" for i in range(n)]
              + ["psi"])
    jobs = [(loaded, m, scheme.value, utility.value, seed)
            for m in _sweep_multipliers(loaded.experiment)
            for scheme in (SharingScheme.OVERLAY, SharingScheme.UNDERLAY)
            for utility in (UtilityKind.WEIGHTED_SUM,
                            UtilityKind.PROPORTIONAL_FAIR)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    _write_csv(out_dir / "sweep.csv", header, rows)
    return {"points": len(rows)}


def _run_surface(loaded: LoadedScenario, out_dir: Path) -> dict:
    scn = loaded.scenario
    op = scn.operators[0]
    k = loaded.experiment.surface_points
    rows = []
    lo_d, hi_d = op.delta_range
    others = sum(o.beta_min for o in scn.operators[1:])
    for di in range(k):
        delta = lo_d + (hi_d - lo_d) * di / max(k - 1, 1)
        try:
            model = op_mod.operator_model(scn, op, delta)
            box = model.box
        except CopssError:
            continue
        if box.clamped or box.empty:
            continue
        for bi in range(k):
            beta = box.lo + (box.hi - box.lo) * bi / max(k - 1, 1)
            rows.append([delta, beta, box.hi,
                         model.utility_value(beta, others)])
    _write_csv(out_dir / "utility_surface.csv",
               ["delta", "beta", "beta_max", "utility"], rows)
    return {"points": len(rows)}


def run_experiment(loaded: LoadedScenario, out_dir, seed: int | None = None,
                   workers: int = 1,
                   preset: ExperimentPreset | None = None) -> dict:
    """Run the configured experiment preset; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preset = preset or loaded.experiment.preset
    seed = loaded.dynamics.seed if seed is None else seed
    extra: dict = {"preset": preset.value}
    if preset is ExperimentPreset.CONVERGENCE_TRACE:
        extra["runs"] = _run_trace(loaded, out, seed)
    elif preset is ExperimentPreset.DENSITY_SWEEP:
        extra["sweep"] = _run_sweep(loaded, out, seed, workers)
    elif preset is ExperimentPreset.UTILITY_SURFACE:
        extra["surface"] = _run_surface(loaded, out)
    else:
        cfg = dataclasses.replace(loaded.dynamics, seed=seed)
        report = gm.run_dynamics(loaded.scenario, cfg)
        _write_csv(out / "final_profile.csv", ["operator", "beta", "delta"],
                   _profile_rows(report.final))
        extra["run"] = {"verdict": report.verdict.value,
                        "iterations": report.iterations,
                        "final_betas": list(report.final.betas),
                        "excluded": list(report.excluded)}
    manifest = _manifest(loaded, seed, extra)
    _write_manifest(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# Command-line interface
# ---------------------------------------------------------------------------


def _read_profile_csv(path, scn: Scenario) -> gm.StrategyProfile:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if len(rows) != scn.n_ops:
        raise ScenarioFormatError(
            f"profile has {len(rows)} rows, scenario has {scn.n_ops} operators")
    try:
        betas = [float(r["beta"]) for r in rows]
    except (KeyError, TypeError, ValueError):
        raise ScenarioFormatError(
            "profile CSV needs operator,beta[,delta] columns") from None
    return gm.profile_from_betas(scn, betas)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copss",
        description="Co-primary spectrum sharing game simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=False):
        p.add_argument("--scenario", required=True, help="scenario TOML file")
        p.add_argument("--out", default=None, required=needs_out,
                       help="output directory")
        p.add_argument("--mode", choices=["jp", "br"], default=None)
        p.add_argument("--kappa-policy", default=None,
                       help="paper | dominant | fixed:<x>")
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--max-iters", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", default=None,
                       help="override the experiment preset")

    for name in ("run", "trace", "sweep", "verify", "welfare", "bargain"):
        p = sub.add_parser(name)
        common(p, needs_out=name in ("trace", "sweep"))
        if name == "sweep":
            p.add_argument("--param", choices=["lambda_d1"], default="lambda_d1",
                           help="swept quantity (operator 1 intra-D2D density)")
            p.add_argument("--from", dest="sweep_from", type=float, default=None,
                           help="lowest density multiplier")
            p.add_argument("--to", dest="sweep_to", type=float, default=None,
                           help="highest density multiplier")
            p.add_argument("--steps", dest="sweep_steps", type=int, default=None)
        if name == "verify":
            p.add_argument("--profile", required=True,
                           help="profile CSV (operator,beta,delta)")
        if name == "bargain":
            p.add_argument("--disagreement",
                           choices=["zero", "baseline", "ne"], default="ne")
    return parser


def _apply_overrides(loaded: LoadedScenario, args) -> LoadedScenario:
    dyn = loaded.dynamics
    if args.mode:
        dyn = dataclasses.replace(dyn, mode=DynamicsMode(args.mode))
    if args.kappa_policy:
        if args.kappa_policy.startswith("fixed:"):
            dyn = dataclasses.replace(
                dyn, kappa_policy=KappaPolicy.FIXED,
                kappa_value=float(args.kappa_policy.split(":", 1)[1]))
        else:
            dyn = dataclasses.replace(dyn,
                                      kappa_policy=KappaPolicy(args.kappa_policy))
    if args.tol is not None:
        dyn = dataclasses.replace(dyn, tol=args.tol)
    if args.max_iters is not None:
        dyn = dataclasses.replace(dyn, max_iters=args.max_iters)
    if args.seed is not None:
        dyn = dataclasses.replace(dyn, seed=args.seed)
    return dataclasses.replace(loaded, dynamics=dyn)


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, default=float) + "\n")


def cli_main(argv=None) -> int:
    """Entry point.  Exit codes: 0 success, 1 validation error, 2 a run
    that did not converge."""
    logging.basicConfig(level=os.environ.get("COPSS_LOG", "WARNING").upper())
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        loaded = _apply_overrides(load_scenario(args.scenario), args)
        scn = loaded.scenario
        if args.command == "run":
            preset = (ExperimentPreset(args.preset) if args.preset
                      else ExperimentPreset.CUSTOM)
            out = args.out or "copss-out"
            manifest = run_experiment(loaded, out, seed=args.seed,
                                      workers=args.workers, preset=preset)
            _emit(manifest)
            verdicts = []
            if "run" in manifest:
                verdicts = [manifest["run"]["verdict"]]
            elif "runs" in manifest:
                verdicts = [manifest["runs"]["jp"]["verdict"]]
            return 0 if all(v == Verdict.CONVERGED.value for v in verdicts) else 2
        if args.command == "trace":
            manifest = run_experiment(loaded, args.out, seed=args.seed,
                                      workers=args.workers,
                                      preset=ExperimentPreset.CONVERGENCE_TRACE)
            _emit(manifest)
            jp = manifest["runs"]["jp"]["verdict"]
            return 0 if jp == Verdict.CONVERGED.value else 2
        if args.command == "sweep":
            spec = loaded.experiment
            overrides = {k: getattr(args, k) for k in
                         ("sweep_from", "sweep_to", "sweep_steps")
                         if getattr(args, k, None) is not None}
            if overrides:
                spec = dataclasses.replace(spec, **overrides)
                loaded = dataclasses.replace(loaded, experiment=spec)
            manifest = run_experiment(loaded, args.out, seed=args.seed,
                                      workers=args.workers,
                                      preset=ExperimentPreset.DENSITY_SWEEP)
            _emit(manifest)
            return 0
        if args.command == "verify":
            profile = _read_profile_csv(args.profile, scn)
            cert = an.verify_ne(scn, profile)
            _emit({"is_ne": cert.is_ne,
                   "per_op_br_gap": list(cert.per_op_br_gap),
                   "uniqueness": cert.uniqueness.value,
                   "index_check": an.diag_dominance_index(scn, profile).value})
            return 0 if cert.is_ne else 2
        if args.command == "welfare":
            report = gm.run_dynamics(scn, loaded.dynamics)
            wr = an.social_welfare_opt(scn, report.final,
                                       seed=loaded.dynamics.seed)
            _emit({"ne_betas": list(report.final.betas),
                   "optimum_betas": list(wr.optimum.betas),
                   "welfare": wr.welfare, "psi": wr.psi,
                   "verdict": report.verdict.value})
            return 0 if report.converged else 2
        if args.command == "bargain":
            report = gm.run_dynamics(scn, loaded.dynamics)
            d = an.disagreement_preset(scn, args.disagreement, report.final)
            bres = an.nash_bargaining(scn, d, seed=loaded.dynamics.seed)
            _emit({"solution_betas": list(bres.solution.betas),
                   "disagreement": list(bres.disagreement),
                   "product_value": bres.product_value,
                   "verdict": report.verdict.value})
            return 0 if report.converged else 2
        parser.error(f"unknown command {args.command!r}")
    except ScenarioFormatError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except CopssError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    return 1


def main() -> None:
    raise SystemExit(cli_main())
