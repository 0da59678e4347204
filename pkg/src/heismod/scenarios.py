"""Scenario model and runner: parse a scenario description, compute the
modulus where one is defined, execute the requested checks, and emit a
deterministic machine-readable report.

Scenarios are plain JSON.  The built-ins under data/ cover both annulus
families, the shear family, the three planar oracles, and a pure
residual battery; each carries its expected closed-form values so a run
doubles as a regression test of the whole pipeline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from time import perf_counter

import numpy as np

from . import expr as E
from .errors import HeismodError, ScenarioError
from .foliation import Foliation, lambda_field_array, leaf_speed_fn, \
    trace_trajectory
from .heis import legendrian_residual
from .modulus import (
    admissibility_check,
    extremal_density,
    modulus_m4,
    perturbation_probe,
)
from .planar import (
    PlanarFoliation,
    PlanarQD,
    lambda_field_2d_array,
    modulus_m2,
)
from .qdiff import QuadDiff

_HEIS_CHECKS = frozenset({
    "b2", "d2prime", "d2doubleprime", "legendrian", "lambda_constancy",
    "admissibility", "perturbation", "trace_vs_closed_form"})
_PLANE_CHECKS = frozenset({"lambda_constancy"})
_EXPECTED_KEYS = frozenset({"modulus", "leaf_length", "volume"})

# fixed check thresholds; scenario tolerances.residual_tol governs the
# operator/legendrian residual rows only
LAMBDA_SPREAD_TOL = {"heisenberg": 1e-6, "plane": 1e-8}
ADMISSIBILITY_TOL = 1e-8
PERTURBATION_TOL = 1e-9
TRACE_DEV_TOL = 1e-6
TRACE_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class Scenario:
    """A validated scenario description."""

    name: str
    space: str
    q_text: str
    foliation: object           # Foliation or PlanarFoliation
    tolerances: dict
    checks: tuple
    expected: dict

    @property
    def q(self):
        if self.space == "heisenberg":
            return QuadDiff.from_string(self.q_text)
        return PlanarQD.from_string(self.q_text)


def _fail(msg: str) -> ScenarioError:
    return ScenarioError(msg)


def scenario_from_dict(raw: dict) -> Scenario:
    """Validate a raw JSON object into a Scenario.

    Raises ScenarioError with a pointed message on every malformation;
    the CLI maps those to exit code 2.
    """
    if not isinstance(raw, dict):
        raise _fail("scenario must be a JSON object")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise _fail("missing scenario name")
    space = raw.get("space")
    if space not in ("heisenberg", "plane"):
        raise _fail(f"{name}: space must be 'heisenberg' or 'plane'")
    q_text = raw.get("q")
    if not isinstance(q_text, str):
        raise _fail(f"{name}: q must be an expression string")
    fol_raw = raw.get("foliation")
    if not isinstance(fol_raw, dict):
        raise _fail(f"{name}: missing foliation object")

    try:
        s_range = tuple(float(x) for x in fol_raw["s_range"])
        p_ranges = [tuple(float(x) for x in r)
                    for r in fol_raw["p_ranges"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise _fail(f"{name}: bad foliation ranges ({exc})") from exc
    if len(s_range) != 2 or any(len(r) != 2 for r in p_ranges):
        raise _fail(f"{name}: ranges must be [lo, hi] pairs")

    try:
        if space == "heisenberg":
            if len(p_ranges) != 2:
                raise _fail(f"{name}: heisenberg charts need two p ranges")
            fol = Foliation.from_strings(
                fol_raw["phi1"], fol_raw["phi2"], s_range,
                (p_ranges[0], p_ranges[1]),
                tuple(fol_raw.get("exclusions") or ()))
            QuadDiff.from_string(q_text)
        else:
            if "phi2" in fol_raw:
                raise _fail(f"{name}: phi2 is a heisenberg-only field")
            if len(p_ranges) != 1:
                raise _fail(f"{name}: plane charts take one p range")
            fol = PlanarFoliation.from_strings(fol_raw["phi1"], s_range,
                                               p_ranges[0])
            PlanarQD.from_string(q_text)
    except ScenarioError:
        raise
    except (HeismodError, ValueError, KeyError) as exc:
        raise _fail(f"{name}: {exc}") from exc

    tol_raw = raw.get("tolerances") or {}
    tolerances = {"quad_tol": 1e-8, "rk_tol": 1e-9, "residual_tol": 1e-9}
    for k, v in tol_raw.items():
        if k not in tolerances:
            raise _fail(f"{name}: unknown tolerance '{k}'")
        if not isinstance(v, (int, float)) or not 0 < v < 1:
            raise _fail(f"{name}: tolerance {k} must be in (0, 1)")
        tolerances[k] = float(v)

    checks = tuple(raw.get("checks") or ())
    allowed = _HEIS_CHECKS if space == "heisenberg" else _PLANE_CHECKS
    for c in checks:
        if c not in _HEIS_CHECKS:
            raise _fail(f"{name}: unknown check '{c}'")
        if c not in allowed:
            raise _fail(f"{name}: check '{c}' does not apply to {space}")

    expected = raw.get("expected") or {}
    for k, v in expected.items():
        if k not in _EXPECTED_KEYS:
            raise _fail(f"{name}: unknown expected key '{k}'")
        if not (isinstance(v, dict) and "value" in v and "rtol" in v):
            raise _fail(f"{name}: expected.{k} needs value and rtol")

    return Scenario(name, space, q_text, fol, tolerances, checks,
                    expected)


def load_scenario(source) -> Scenario:
    """Load a scenario from a path or a built-in name."""
    p = Path(source)
    if p.suffix == ".json" or p.exists():
        try:
            raw = json.loads(p.read_text())
        except OSError as exc:
            raise _fail(f"cannot read {source}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise _fail(f"{source} is not valid JSON: {exc}") from exc
        return scenario_from_dict(raw)
    if source in list_scenarios():
        data = resources.files("heismod").joinpath(
            "data", f"{source}.json").read_text()
        return scenario_from_dict(json.loads(data))
    raise _fail(f"no scenario file or built-in named '{source}'")


def list_scenarios() -> list:
    """Stable (sorted) names of the built-in scenarios."""
    folder = resources.files("heismod").joinpath("data")
    return sorted(f.name[:-5] for f in folder.iterdir()
                  if f.name.endswith(".json"))


# ---------------------------------------------------------------------------
# checks

def lambda_spread_stats(q, fol, n_s: int = 101, n_leaves: int = 100):
    """Worst per-leaf relative spread of lambda along s."""
    if isinstance(fol, Foliation):
        m = max(2, math.isqrt(n_leaves))
        (s0, s1) = fol.s_range
        (a0, a1), (b0, b1) = fol.p_box
        fr = np.linspace(0.0, 1.0, m + 2)[1:-1]
        s = s0 + (s1 - s0) * np.linspace(0.02, 0.98, n_s)
        lam = lambda_field_array(q, fol, {
            "s": s[:, None, None],
            "p1": (a0 + (a1 - a0) * fr)[None, :, None],
            "p2": (b0 + (b1 - b0) * fr)[None, None, :]})
    else:
        (s0, s1) = fol.s_range
        (p0, p1) = fol.p_range
        s = s0 + (s1 - s0) * np.linspace(0.02, 0.98, n_s)
        pr = p0 + (p1 - p0) * np.linspace(0.0, 1.0, n_leaves + 2)[1:-1]
        lam = lambda_field_2d_array(q, fol,
                                    {"s": s[:, None], "p": pr[None, :]})
    scale = np.abs(lam).max(axis=0)
    return float((np.ptp(lam, axis=0) / scale).max())


def trace_leaf_deviation(q: QuadDiff, fol: Foliation, p1: float,
                         p2: float, rk_tol: float = 1e-9):
    """(sup deviation, max residual) of the traced trajectory against
    the chart's own leaf through (p1, p2).

    The tracer parametrizes by q-arc-length and the chart by s, so the
    comparison goes through a monotone reparametrization: each traced
    sample is projected onto the leaf's (|z|, t) profile, which pins the
    matching s without importing the cumulative-length table's error.
    The deviation is then the full coordinate distance at the matched
    parameter; a Koranyi comparison would instead turn the tracer's
    O(rk_tol) vertical drift into its square root and swamp everything.
    """
    from scipy.integrate import cumulative_simpson

    (s0, s1) = fol.s_range
    span = s1 - s0
    grid = np.linspace(s0 + 0.02 * span, s1 - 0.02 * span, 16385)
    ones = np.ones_like(grid)
    binding = {"s": grid, "p1": p1 * ones, "p2": p2 * ones}
    speed = leaf_speed_fn(q, fol)
    v = np.ravel(speed(binding))
    sigma = cumulative_simpson(v, x=grid, initial=0.0)
    z_ref = np.ravel(np.broadcast_to(
        E.eval_array(fol.phi1, binding), grid.shape))
    t_ref = np.ravel(np.broadcast_to(
        E.eval_array(fol.phi2, binding), grid.shape)).real

    i_a = int(0.25 * grid.size)
    i_b = int(0.75 * grid.size)
    start = fol.point_at(grid[i_a], p1, p2)
    leaf_dir = E.evaluate(fol.d_s1, {"s": grid[i_a], "p1": p1, "p2": p2})
    path = trace_trajectory(q, start, 1, rk_tol,
                            max_length=sigma[i_b] - sigma[i_a])
    step = path.samples[1][2].dz if len(path.samples) > 1 else \
        path.samples[0][2].dz
    if (step.conjugate() * leaf_dir).real < 0:
        path = trace_trajectory(q, start, -1, rk_tol,
                                max_length=sigma[i_b] - sigma[i_a])

    pts = np.array([[abs(pt.z), pt.t, pt.z.real, pt.z.imag]
                    for _, pt, _ in path.samples])
    # profile distance^2 to the reference polyline, evaluated on a
    # window around the arclength-based guess of the matching node
    guess = np.searchsorted(grid, np.interp(
        sigma[i_a] + path.params(), sigma, grid))
    scale = max(np.abs(z_ref).max(), np.abs(t_ref).max())
    dev = 0.0
    for k, j in enumerate(guess):
        lo, hi = max(j - 8, 0), min(j + 9, grid.size)
        d2 = ((np.abs(z_ref[lo:hi]) - pts[k, 0]) ** 2
              + (t_ref[lo:hi] - pts[k, 1]) ** 2)
        m = lo + int(np.argmin(d2))
        sm = grid[m]
        if 0 < m < grid.size - 1:
            a, b, c = d2[m - 1 - lo], d2[m - lo], d2[m + 1 - lo]
            denom = a - 2 * b + c
            if denom > 1e-30 * scale ** 2:
                sm += 0.5 * (a - c) / denom * (grid[1] - grid[0])
        bref = {"s": sm, "p1": p1, "p2": p2}
        zr = complex(E.evaluate(fol.phi1, bref))
        tr = complex(E.evaluate(fol.phi2, bref)).real
        dev = max(dev, math.hypot(abs(zr - (pts[k, 2] + 1j * pts[k, 3])),
                                  tr - pts[k, 1]))
    resid = max(abs(legendrian_residual(pt.z, tan))
                for _, pt, tan in path.samples)
    return dev, resid


def _residual_max(q: QuadDiff, fol: Foliation, which: str) -> float:
    ex = {"b2": q.b2_expr, "d2prime": q.d2prime_expr,
          "d2doubleprime": q.d2doubleprime_expr}[which]
    vals = E.eval_array(fol.compose(ex), fol.grid(6))
    return float(np.abs(vals).max())


def _check_rows(scn: Scenario, report, rk_tol: float) -> list:
    """Execute the requested checks; one dict per row (two for traces)."""
    q, fol = scn.q, scn.foliation
    rtol = scn.tolerances["residual_tol"]
    rows = []

    def row(name, value, threshold, ok):
        rows.append({"name": name, "pass": bool(ok),
                     "value": float(value), "threshold": float(threshold)})

    for c in scn.checks:
        if c in ("b2", "d2prime", "d2doubleprime"):
            worst = _residual_max(q, fol, c)
            row(c, worst, rtol, worst <= rtol)
        elif c == "legendrian":
            worst = float(np.abs(E.eval_array(
                fol.legendrian_expr, fol.grid(8))).max())
            row(c, worst, rtol, worst <= rtol)
        elif c == "lambda_constancy":
            spread = lambda_spread_stats(q, fol)
            tol = LAMBDA_SPREAD_TOL[scn.space]
            row(c, spread, tol, spread <= tol)
        elif c == "admissibility":
            mn, _ = admissibility_check(extremal_density(q, fol))
            row(c, mn, ADMISSIBILITY_TOL, mn >= 1.0 - ADMISSIBILITY_TOL)
        elif c == "perturbation":
            rng = np.random.default_rng(0)
            worst_ratio = math.inf
            for _ in range(5):
                c0, c1, c2 = rng.uniform(-0.4, 0.4, 3)
                cs = rng.uniform(0.3, 1.0)
                g = (f"{c0:.6f} + {cs:.6f}*sin(s) + {c1:.6f}*p1"
                     f" + {c2:.6f}*cos(p2)")
                energy, ref = perturbation_probe(
                    q, fol, g, 0.1, tol=scn.tolerances["quad_tol"] * 10)
                worst_ratio = min(worst_ratio, energy / ref)
            row(c, worst_ratio, PERTURBATION_TOL,
                worst_ratio >= 1.0 - PERTURBATION_TOL)
        elif c == "trace_vs_closed_form":
            (a0, a1), (b0, b1) = fol.p_box
            dev, resid = trace_leaf_deviation(
                q, fol, 0.5 * (a0 + a1), 0.5 * (b0 + b1), rk_tol)
            row(c, dev, TRACE_DEV_TOL, dev <= TRACE_DEV_TOL)
            row("trace_residual", resid, TRACE_RESIDUAL_TOL,
                resid <= TRACE_RESIDUAL_TOL)

    for key, gate in sorted(scn.expected.items()):
        if report is None:
            row(f"expected_{key}", math.nan, gate["rtol"], False)
            continue
        if key == "modulus":
            got = report.modulus
        elif key == "leaf_length":
            got = report.leaf_length_stats[2]
        else:
            got = report.meta.get("q_volume", report.meta.get("q_area"))
        want, tol = float(gate["value"]), float(gate["rtol"])
        row(f"expected_{key}", got, tol,
            abs(got - want) <= tol * abs(want))
    return rows


def _needs_modulus(scn: Scenario) -> bool:
    return bool(scn.expected) or bool(
        {"admissibility", "perturbation"} & set(scn.checks))


@dataclass(frozen=True)
class RunReport:
    """Everything a scenario run produced, JSON-ready."""

    name: str
    modulus_report: object      # ModulusReport or None
    checks: list
    convergence: list
    wall_clock_s: float
    started: str

    @property
    def passed(self) -> bool:
        return all(r["pass"] for r in self.checks)

    def to_json_dict(self) -> dict:
        rep = self.modulus_report
        return {
            "name": self.name,
            "modulus": None if rep is None else rep.modulus,
            "error_estimate": None if rep is None else rep.error_estimate,
            "checks": self.checks,
            "convergence": self.convergence,
            "timestamp": {"started": self.started,
                          "wall_clock_s": self.wall_clock_s},
        }


def run_scenario(scn: Scenario, *, quad_tol: float | None = None,
                 rk_tol: float | None = None,
                 override_b2_check: bool = False) -> RunReport:
    """Compute, check, and package one scenario."""
    t0 = perf_counter()
    started = datetime.now(timezone.utc).isoformat()
    tol = quad_tol if quad_tol is not None else scn.tolerances["quad_tol"]
    rk = rk_tol if rk_tol is not None else scn.tolerances["rk_tol"]

    report = None
    convergence = []
    if _needs_modulus(scn):
        for level in (100.0 * tol, 10.0 * tol, tol):
            if scn.space == "heisenberg":
                report = modulus_m4(scn.q, scn.foliation, tol=level,
                                    override_b2_check=override_b2_check)
            else:
                report = modulus_m2(scn.q, scn.foliation, tol=level)
            convergence.append([level, report.modulus])

    checks = _check_rows(scn, report, rk)
    return RunReport(scn.name, report, checks, convergence,
                     perf_counter() - t0, started)
