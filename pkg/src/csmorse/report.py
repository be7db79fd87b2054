"""Assemble analysis results into JSON-ready dictionaries with canonical ordering."""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .csfun import active_set, label, validate_cs
from .expr import ExprDomainError, finite_difference_check
from .geometry import sample_points
from .scenario import Scenario
from .search import SearchConfig, critical_values, find_critical_points
from .strata import fiber_census, grid_levels, handle_census, stratum_census, trisection_check

SCHEMA_PATH = Path(__file__).with_name("schema.json")
REPORT_DIGITS = 12
RESIDUAL_CEILING = 1e-9
AD_TOLERANCE = 1e-6


class ValidationFailure(RuntimeError):
    def __init__(self, message: str, details: Optional[dict] = None):
        super().__init__(message)
        self.details = details or {}


class InternalConsistencyError(RuntimeError):
    pass


def _num(v: float):
    v = float(v)
    if not np.isfinite(v):
        return None
    r = float(f"{v:.{REPORT_DIGITS}g}")
    return 0.0 if r == 0 else r


def clean(obj):
    """Round floats to a fixed number of significant digits; tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


def dumps(report: dict) -> str:
    return json.dumps(clean(report), indent=2, sort_keys=False) + "\n"


# --------------------------------------------------------------------------
# analyze

def _record_json(r) -> dict:
    nd = r.nondegeneracy
    return {
        "x": r.x,
        "stratum": label(r.J),
        "value": r.value,
        "lambda": r.lam.weights,
        "mu": r.mu,
        "residual": r.residual,
        "min_norm": r.min_norm,
        "cluster_size": r.cluster_size,
        "nondegenerate": nd.nondegenerate,
        "nd1": nd.nd1_ok,
        "nd2": nd.nd2_ok,
        "quadratic_index": nd.quadratic_index,
        "hat_tangent_dim": nd.hat_tangent_dim,
        "restricted_hessian_eigenvalues": sorted(nd.restricted_hessian_eigenvalues),
        "handle": None if r.handle is None else {
            "kind": r.handle.kind, "total_index": r.handle.total_index,
            "k": r.handle.k_param, "m": r.handle.m_param,
        },
        "warnings": r.warnings,
    }


def verify_records(f, M, records) -> None:
    """Re-check every record; a failure here is a bug, not bad input."""
    for r in records:
        where = f"critical point {np.round(r.x, 9).tolist()} in stratum {label(r.J)}"
        if r.residual > RESIDUAL_CEILING:
            raise InternalConsistencyError(f"{where}: KKT residual {r.residual:.3e} after polish")
        if active_set(f, r.x).indices != r.J:
            raise InternalConsistencyError(f"{where}: active set changed after polish")
        if not M.is_on(r.x)[0]:
            raise InternalConsistencyError(f"{where}: left the manifold")


def run_search(sc: Scenario, jobs: int = 1):
    f, M = sc.build()
    cfg = SearchConfig(**{**sc.search.__dict__, "jobs": jobs})
    return f, M, find_critical_points(f, M, cfg)


def analyze_scenario(sc: Scenario, jobs: int = 1) -> dict:
    f, M = sc.build()
    val = validate_cs(f, M, sc.validate_probes, sc.seed)
    validation = {
        "ok": val.ok,
        "probes": val.probes,
        "multi_active_probes": val.multi_active_probes,
        "worst_condition": val.worst_condition,
        "violations": [{"point": v.point, "active": label(v.active), "condition": v.condition}
                       for v in val.violations[:20]],
    }
    if not val.ok:
        raise ValidationFailure("selections are not a CS function on M: active gradients affinely dependent",
                                validation)
    _, _, res = run_search(sc, jobs)
    verify_records(f, M, res.records)
    census = stratum_census(f, M, sc.census_samples, sc.seed)
    cvals = critical_values(res.records, res.degenerate_sets)
    tri = trisection_check(f, M, res, sc.search.starts_per_subset)
    hc = handle_census(res.records, tri.g, tri.k)
    return {
        "tool": {"name": "csmorse", "version": __version__},
        "scenario": {
            "name": sc.name, "n": sc.n, "manifold_dimension": M.dim, "m": f.m,
            "selector": sc.selector, "selections": sc.selections, "constraints": sc.constraints,
            "seed": sc.seed,
        },
        "tolerances": sc.tolerances.__dict__,
        "search_config": {k: v for k, v in sc.search.__dict__.items() if k != "jobs"},
        "validation": validation,
        "strata": [
            {
                "stratum": label(J), "sample_count": e.sample_count,
                "dimension": e.dimension if e.dimension is not None else "insufficient data",
                "expected_dimension": e.expected_dimension, "gap_fraction": e.gap_fraction,
                "anchors_tested": e.anchors_tested, "f_min": e.f_min, "f_max": e.f_max,
            }
            for J, e in census.strata.items()
        ],
        "frontier": [[label(T), label(S)] for T, S in census.frontier],
        "frontier_violations": [[label(T), label(S)] for T, S in census.frontier_violations],
        "skeleta": [len(s) for s in census.skeleta()],
        "critical_points": [_record_json(r) for r in res.records],
        "degenerate_sets": [
            {"stratum": label(d.J), "value": d.value, "diameter": d.diameter, "members": d.members,
             "max_residual": d.max_residual, "reason": d.reason, "representatives": d.representatives}
            for d in res.degenerate_sets
        ],
        "restriction_points": [
            {"stratum": label(p.J), "x": p.x, "value": p.value, "lambda": p.lam, "index": p.index}
            for p in res.restriction_points
        ],
        "critical_values": cvals,
        "cs_morse": res.cs_morse,
        "handle_census": {
            "counts": hc.counts, "template": hc.template, "mismatches": hc.mismatches,
            "symmetric": hc.symmetric, "verdict": hc.verdict,
        },
        "trisection": {
            "applies": tri.applies, "g": tri.g, "k": tri.k, "evidence": tri.evidence,
            "checklist": [{"hypothesis": n, "ok": ok, "detail": d} for n, ok, d in tri.checklist],
        },
        "diagnostics": res.diagnostics,
    }


# --------------------------------------------------------------------------
# fibers

def fiber_levels(cvals: Sequence[float], levels: Optional[Sequence[float]], grid: Optional[int]) -> List[float]:
    if levels is not None:
        return [float(t) for t in levels]
    return grid_levels(cvals, grid)


def fibers_scenario(sc: Scenario, levels=None, grid=None, samples: Optional[int] = None, jobs: int = 1):
    """Returns (summary, clouds) where clouds maps level -> (points, labels)."""
    f, M, res = run_search(sc, jobs)
    cvals = critical_values(res.records, res.degenerate_sets)
    rng = (min(cvals), max(cvals)) if cvals else None
    ts = fiber_levels(cvals, levels, grid)
    out, clouds = [], {}
    for t in ts:
        fc = fiber_census(f, M, t, samples or sc.fiber_samples, sc.eps_factor, sc.seed,
                          value_range=rng, critical_values=cvals)
        clouds[t] = (fc.points, fc.labels)
        out.append({
            "level": t, "samples": fc.n_samples, "components": fc.components,
            "component_sizes": fc.component_sizes, "regular": fc.is_regular,
            "eps": fc.eps, "median_nn": fc.median_nn,
            "per_stratum": {label(J): c for J, c in fc.per_stratum.items()},
        })
    summary = {"scenario": sc.name, "seed": sc.seed, "critical_values": cvals, "fibers": out}
    return summary, clouds


def level_filename(t: float) -> str:
    return f"fiber_{_num(t)!r}.csv"


# --------------------------------------------------------------------------
# check-derivatives

def check_derivatives(sc: Scenario, points_per_expression: int = 8, points=None) -> dict:
    f, M = sc.build()
    X = np.asarray(points, dtype=float) if points is not None else sample_points(
        M, points_per_expression, sc.seed, stream_name="derivatives")
    rows = []
    named = [(f"constraint[{i}]", e) for i, e in enumerate(M.constraints)] + \
            [(f"selection[{i + 1}]", e) for i, e in enumerate(f.selections)]
    for name, e in named:
        g_err = h_err = 0.0
        clipped = False
        tested = skipped = 0
        for x in X:
            try:
                r = finite_difference_check(e, x)
            except ExprDomainError:
                skipped += 1
                continue
            tested += 1
            g_err, h_err = max(g_err, r["gradient_error"]), max(h_err, r["hessian_error"])
            clipped = clipped or r["step_clipped"]
        ok = tested > 0 and max(g_err, h_err) <= AD_TOLERANCE
        warnings = []
        if clipped:
            warnings.append("finite-difference step clipped near a domain edge")
        if skipped:
            warnings.append(f"{skipped} points outside the expression domain skipped")
        rows.append({"expression": name, "source": e.source, "points": tested,
                     "gradient_error": g_err, "hessian_error": h_err, "pass": ok, "warnings": warnings})
    return {"scenario": sc.name, "tolerance": AD_TOLERANCE, "rows": rows,
            "pass": all(r["pass"] for r in rows)}
