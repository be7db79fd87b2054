"""Scenario files: TOML documents naming a manifold, selections and run settings."""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .csfun import CSFunction
from .expr import ExprSyntaxError, parse
from .geometry import Manifold
from .search import SearchConfig

FIXTURE_DIR = Path(__file__).with_name("fixtures")

TOLERANCE_KEYS = ("active_tol", "crit_tol", "nd2_tol", "on_manifold_tol")
SEARCH_KEYS = tuple(f.name for f in fields(SearchConfig) if f.name not in ("seed", "jobs", "crit_tol", "nd2_tol"))
CENSUS_KEYS = ("samples", "fiber_samples", "eps_factor", "validate_probes")
TOP_KEYS = ("name", "n", "selector", "selections", "constraints", "bbox", "seed",
            "tolerances", "search", "census")


class ScenarioError(ValueError):
    """Invalid scenario; carries a location when one is known."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None, field: str = ""):
        super().__init__(message)
        self.message = message
        self.line = line
        self.column = column
        self.field = field

    def to_json(self) -> dict:
        out = {"error": "validation", "message": self.message}
        if self.field:
            out["field"] = self.field
        if self.line is not None:
            out["line"] = self.line
            out["column"] = self.column
        return out


@dataclass
class Tolerances:
    active_tol: float = 1e-8
    crit_tol: float = 1e-8
    nd2_tol: float = 1e-7
    on_manifold_tol: float = 1e-10


@dataclass
class Scenario:
    name: str
    n: int
    constraints: List[str]
    selections: List[str]
    selector: str
    bbox: np.ndarray
    tolerances: Tolerances
    search: SearchConfig
    seed: int = 0
    census_samples: int = 2000
    fiber_samples: int = 2000
    eps_factor: float = 3.0
    validate_probes: int = 500
    source: str = field(default="", repr=False)

    def build(self) -> Tuple[CSFunction, Manifold]:
        M = Manifold(self.n, tuple(parse(g, self.n) for g in self.constraints), self.bbox,
                     on_manifold_tol=self.tolerances.on_manifold_tol, name=self.name)
        f = CSFunction(tuple(parse(s, self.n) for s in self.selections), self.selector,
                       active_tol=self.tolerances.active_tol)
        return f, M

    def with_seed(self, seed: int) -> "Scenario":
        cfg = SearchConfig(**{**self.search.__dict__, "seed": seed})
        return Scenario(**{**self.__dict__, "seed": seed, "search": cfg})


def resolve(path: str) -> Path:
    """A path on disk, or the name of a built-in fixture."""
    p = Path(path)
    if p.exists():
        return p
    for cand in (FIXTURE_DIR / path, FIXTURE_DIR / f"{path}.toml", FIXTURE_DIR / p.name):
        if cand.exists():
            return cand
    return p


def fixture_names() -> List[str]:
    return sorted(p.stem for p in FIXTURE_DIR.glob("*.toml"))


def _locate(text: str, needle: str) -> Tuple[Optional[int], Optional[int]]:
    """1-based line and column of the first quoted occurrence of ``needle``."""
    for q in ('"', "'"):
        i = text.find(q + needle + q)
        if i >= 0:
            i += 1
            return text.count("\n", 0, i) + 1, i - text.rfind("\n", 0, i)
    return None, None


def _key_location(text: str, key: str) -> Tuple[Optional[int], Optional[int]]:
    m = re.search(rf"^\s*{re.escape(key)}\s*=", text, flags=re.M)
    if not m:
        return None, None
    i = m.start() + len(m.group(0)) - len(m.group(0).lstrip())
    return text.count("\n", 0, i) + 1, i - text.rfind("\n", 0, i)


def _err(text, message, key, needle=None, offset=0):
    line, col = _locate(text, needle) if needle is not None else _key_location(text, key)
    if line is None and needle is not None:
        line, col = _key_location(text, key.split("[")[0].split(".")[-1])
    elif needle is not None:
        col += offset
    return ScenarioError(message, line, col, key)


def _positive(text, table: dict, key: str, prefix: str, kind=float):
    v = table[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise _err(text, f"{prefix}{key} must be an integer", key)
    if kind is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
        raise _err(text, f"{prefix}{key} must be a number", key)
    if not v > 0:
        raise _err(text, f"{prefix}{key} must be positive", key)
    return kind(v)


def _unknown(text, table: dict, allowed, where: str):
    for k in table:
        if k not in allowed:
            raise _err(text, f"unknown key '{k}' in {where}", k)


def parse_scenario(text: str) -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        line, col = getattr(e, "lineno", None), getattr(e, "colno", None)
        msg = getattr(e, "msg", str(e))
        if line is None:
            m = re.search(r"\(at line (\d+), column (\d+)\)", str(e))
            if m:
                line, col = int(m.group(1)), int(m.group(2))
            msg = re.sub(r"\s*\(at .*\)$", "", str(e))
        raise ScenarioError(f"malformed scenario file: {msg}", line, col)

    _unknown(text, doc, TOP_KEYS, "scenario")
    for key in ("name", "n", "selections"):
        if key not in doc:
            raise ScenarioError(f"missing required key '{key}'", field=key)
    name = doc["name"]
    if not isinstance(name, str) or not name:
        raise _err(text, "name must be a non-empty string", "name")
    n = _positive(text, doc, "n", "", int)
    selector = doc.get("selector", "max")
    if selector not in ("max", "min"):
        raise _err(text, f"selector must be 'max' or 'min', got {selector!r}", "selector")

    exprs = {}
    for key in ("selections", "constraints"):
        items = doc.get(key, [])
        if not isinstance(items, list) or not all(isinstance(s, str) for s in items):
            raise _err(text, f"{key} must be a list of expression strings", key)
        for i, s in enumerate(items):
            try:
                parse(s, n)
            except ExprSyntaxError as e:
                raise _err(text, f"{key}[{i}]: {e.reason}", f"{key}[{i}]", needle=s, offset=e.offset)
        exprs[key] = items
    if not exprs["selections"]:
        raise _err(text, "need at least one selection", "selections")
    if len(exprs["constraints"]) >= n:
        raise _err(text, "need fewer constraints than ambient dimensions", "constraints")

    if "bbox" in doc:
        try:
            bbox = np.asarray(doc["bbox"], dtype=float)
        except (TypeError, ValueError):
            raise _err(text, "bbox must be a list of [lower, upper] pairs", "bbox")
        if bbox.shape != (n, 2) or np.any(bbox[:, 0] >= bbox[:, 1]) or not np.all(np.isfinite(bbox)):
            raise _err(text, f"bbox must hold {n} increasing [lower, upper] pairs", "bbox")
    else:
        bbox = np.tile([-2.0, 2.0], (n, 1))

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise _err(text, "seed must be a non-negative integer", "seed")

    tol_doc = doc.get("tolerances", {})
    _unknown(text, tol_doc, TOLERANCE_KEYS, "[tolerances]")
    tol = Tolerances(**{k: _positive(text, tol_doc, k, "tolerances.") for k in tol_doc})

    search_doc = doc.get("search", {})
    _unknown(text, search_doc, SEARCH_KEYS, "[search]")
    ints = {f.name for f in fields(SearchConfig) if f.type in ("int", int)}
    search_kw = {k: _positive(text, search_doc, k, "search.", int if k in ints else float) for k in search_doc}
    try:
        cfg = SearchConfig(seed=seed, crit_tol=tol.crit_tol, nd2_tol=tol.nd2_tol, **search_kw)
    except ValueError as e:
        raise ScenarioError(str(e), field="search")

    census = doc.get("census", {})
    _unknown(text, census, CENSUS_KEYS, "[census]")
    ckw = {k: _positive(text, census, k, "census.", float if k == "eps_factor" else int) for k in census}

    sc = Scenario(
        name=name, n=n, constraints=exprs["constraints"], selections=exprs["selections"],
        selector=selector, bbox=bbox, tolerances=tol, search=cfg, seed=seed,
        census_samples=ckw.get("samples", 2000), fiber_samples=ckw.get("fiber_samples", 2000),
        eps_factor=ckw.get("eps_factor", 3.0), validate_probes=ckw.get("validate_probes", 500),
        source=text,
    )
    sc.build()
    return sc


def load_scenario(path) -> Scenario:
    p = resolve(str(path))
    try:
        text = p.read_text()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario file '{path}': {e.strerror or e}")
    return parse_scenario(text)
