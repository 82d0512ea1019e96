"""Wildfire instances on a grid landscape.

Each cell is a node.  Fire spreads to the 8 neighbouring cells with rate
``beta_b * beta_veg(destination) * beta_w(direction)``, scaled down on
diagonals.  Water cells keep their node index but have no edges.

Bearings are compass degrees (0 = north, 90 = east) with row 0 at the north
edge.  A wind bearing is where the wind comes *from*, so a northeasterly
(45 degrees) pushes fire towards the southwest.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import DomainError
from .network import SpreadingNetwork, bound_matrices, spectral_radius

CELL_CODES = {"D": "desert", "G": "grassland", "E": "eucalyptus", "W": "water", "C": "city"}
NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class Wind:
    speed: float = 0.0
    bearing_deg: float = 0.0

    @property
    def heading(self) -> float:
        """Direction the wind blows towards."""
        return (self.bearing_deg + 180.0) % 360.0


@dataclass(frozen=True)
class WildfireParams:
    beta_baseline: float = 0.5
    beta_veg: dict = field(default_factory=lambda: {
        "desert": 0.1, "grassland": 1.0, "eucalyptus": 1.4, "city": 1.0})
    delta: float = 0.5
    cost_city: float = 1.0
    cost_other: float = 0.001
    c1: float = 0.045
    c2: float = 0.131
    diagonal_factor: float = 0.83
    h: float = 0.1
    beta_lower_fraction: float = 1e-4
    delta_upper: float = 0.9
    delta_cap: float = 1.0
    alpha: float | None = None
    alpha_margin: float = 0.05
    gamma_bar: float = 10.0
    L: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "beta_veg":
                if any(not b > 0 for b in v.values()):
                    raise DomainError("vegetation factors must be positive")
            elif f.name == "alpha":
                if v is not None and not 0 < v <= 1:
                    raise DomainError("alpha must lie in (0, 1]")
            elif f.name == "L":
                if v < 1:
                    raise DomainError("L must be at least 1")
            elif not v > 0:
                raise DomainError(f"{f.name} must be positive")
        if not (self.delta <= self.delta_upper < self.delta_cap):
            raise DomainError("need delta <= delta_upper < delta_cap")
        if self.beta_lower_fraction > 1:
            raise DomainError("beta_lower_fraction must not exceed 1")

    def with_overrides(self, overrides: dict | None) -> "WildfireParams":
        if not overrides:
            return self
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise DomainError(f"unknown scenario parameters: {sorted(unknown)}")
        ov = dict(overrides)
        if "beta_veg" in ov:
            ov["beta_veg"] = {**self.beta_veg, **ov["beta_veg"]}
        return replace(self, **ov)


@dataclass(frozen=True)
class Landscape:
    """Grid of cell codes (``D``, ``G``, ``E``, ``W``, ``C``) with wind and outbreak data."""

    cells: tuple
    wind: Wind = Wind()
    seeds: tuple = ()
    seed_fraction: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        cells = tuple(str(r) for r in self.cells)
        object.__setattr__(self, "cells", cells)
        if not cells or not cells[0]:
            raise DomainError("landscape dimensions must be positive")
        if any(len(r) != len(cells[0]) for r in cells):
            raise DomainError("landscape rows must have equal length")
        bad = set("".join(cells)) - set(CELL_CODES)
        if bad:
            raise DomainError(f"unknown cell codes {sorted(bad)}")
        if self.wind.speed < 0:
            raise DomainError("wind speed must be nonnegative")
        seeds = tuple((int(r), int(c)) for r, c in self.seeds)
        object.__setattr__(self, "seeds", seeds)
        for r, c in seeds:
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise DomainError(f"seed cell ({r}, {c}) outside the grid")
            if cells[r][c] == "W":
                raise DomainError(f"seed cell ({r}, {c}) is water")
        if self.seed_fraction is not None and not 0 < self.seed_fraction <= 1:
            raise DomainError("seed fraction must lie in (0, 1]")

    @property
    def rows(self) -> int:
        return len(self.cells)

    @property
    def cols(self) -> int:
        return len(self.cells[0])

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def node(self, r: int, c: int) -> int:
        return r * self.cols + c

    def code(self, node: int) -> str:
        return self.cells[node // self.cols][node % self.cols]

    def codes(self) -> np.ndarray:
        return np.array([list(r) for r in self.cells])

    def to_dict(self) -> dict:
        d = {"rows": self.rows, "cols": self.cols, "cells": list(self.cells),
             "wind": {"speed": self.wind.speed, "bearing_deg": self.wind.bearing_deg}}
        if self.seeds:
            d["seeds"] = [list(s) for s in self.seeds]
        if self.seed_fraction is not None:
            d["seed_fraction"] = self.seed_fraction
        if self.params:
            d["params"] = dict(self.params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Landscape":
        try:
            cells = d["cells"]
            wind = Wind(**d.get("wind", {}))
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed landscape: {exc}") from exc
        out = cls(tuple(cells), wind, tuple(map(tuple, d.get("seeds", []))),
                  d.get("seed_fraction"), dict(d.get("params", {})))
        if ("rows" in d and d["rows"] != out.rows) or ("cols" in d and d["cols"] != out.cols):
            raise DomainError("rows/cols disagree with the cell grid")
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Landscape":
        return cls.from_dict(json.loads(Path(path).read_text()))


def wind_factor(params: WildfireParams, edge_bearing: float, wind: Wind) -> float:
    """``exp(V c1 + V c2 (cos theta - 1))`` with ``theta`` between spread and wind heading."""
    theta = math.radians(edge_bearing - wind.heading)
    V = wind.speed
    return math.exp(V * params.c1 + V * params.c2 * (math.cos(theta) - 1.0))


def _bearing(dr: int, dc: int) -> float:
    return math.degrees(math.atan2(dc, -dr)) % 360.0


def build_wildfire_network(landscape: Landscape,
                           params: WildfireParams | None = None) -> SpreadingNetwork:
    """Spreading network for ``landscape``; landscape ``params`` override ``params``."""
    params = (params or WildfireParams()).with_overrides(landscape.params)
    R, Cn, n = landscape.rows, landscape.cols, landscape.n
    factors = {d: wind_factor(params, _bearing(*d), landscape.wind) for d in NEIGHBOURS}
    rows, cols, beta = [], [], []
    for r in range(R):
        for c in range(Cn):
            src = landscape.cells[r][c]
            if src == "W":
                continue
            for dr, dc in NEIGHBOURS:
                rr, cc = r + dr, c + dc
                if not (0 <= rr < R and 0 <= cc < Cn) or landscape.cells[rr][cc] == "W":
                    continue
                b = params.beta_baseline * params.beta_veg[CELL_CODES[landscape.cells[rr][cc]]]
                b *= factors[(dr, dc)]
                if dr and dc:
                    b *= params.diagonal_factor
                rows.append(landscape.node(rr, cc))
                cols.append(landscape.node(r, c))
                beta.append(b)
    beta = np.array(beta)
    codes = np.array([landscape.code(i) for i in range(n)])
    cost = np.where(codes == "C", params.cost_city, params.cost_other)
    ones = np.ones(n)
    fields_ = dict(
        n=n, rows=np.array(rows, dtype=np.int64), cols=np.array(cols, dtype=np.int64),
        beta_lower=params.beta_lower_fraction * beta, beta_upper=beta,
        delta_lower=params.delta * ones, delta_upper=params.delta_upper * ones,
        delta_cap=params.delta_cap * ones, cost=cost,
        edge_weight=np.ones(len(beta)), node_weight=ones, h=params.h)
    col_sum = params.h * np.bincount(fields_["cols"], weights=beta, minlength=n)
    if col_sum.size and col_sum.max() >= 1:
        j = int(col_sum.argmax())
        raise DomainError(f"step size too large: h * sum of rates out of node {j} is "
                          f"{col_sum[j]:.4g} >= 1; lower h")
    alpha = params.alpha
    if alpha is None:
        probe = SpreadingNetwork(**fields_, alpha=1.0, validate=False)
        alpha = min(1.0, 1.0 / (params.alpha_margin + spectral_radius(bound_matrices(probe)[1])))
    return SpreadingNetwork(**fields_, alpha=alpha)


def seed_outbreak(landscape: Landscape, spec=None, seed: int = 0) -> np.ndarray:
    """Initial state with ``x_i = 1`` on seeded cells.

    ``spec`` is a list of ``(row, col)`` cells, a fraction in ``(0, 1]`` of the
    non-water cells chosen by ``numpy.random.default_rng(seed)``, or ``None``
    for the landscape's own seeds.
    """
    if spec is None:
        spec = landscape.seed_fraction if landscape.seed_fraction is not None else landscape.seeds
    x = np.zeros(landscape.n)
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        if not 0 < spec <= 1:
            raise DomainError("seed fraction must lie in (0, 1]")
        land = np.array([i for i in range(landscape.n) if landscape.code(i) != "W"])
        k = min(math.ceil(spec * landscape.n - 1e-9), len(land))
        pick = np.random.default_rng(seed).choice(land, size=k, replace=False)
        x[pick] = 1.0
        return x
    for r, c in spec:
        if not (0 <= r < landscape.rows and 0 <= c < landscape.cols):
            raise DomainError(f"seed cell ({r}, {c}) outside the grid")
        if landscape.cells[r][c] == "W":
            raise DomainError(f"cannot seed water cell ({r}, {c})")
        x[landscape.node(r, c)] = 1.0
    return x


def generate_landscape(rows: int, cols: int, seed: int = 0, wind: Wind | None = None,
                       seeds=None, seed_fraction: float | None = None) -> Landscape:
    """Deterministic fictional landscape.

    Grassland background, a city in the southwest corner (downwind of a
    northeasterly), a river running north to south, a eucalyptus stand in the
    north and a desert patch in the east.  Without explicit seeds the
    outbreak starts in the northeast corner.
    """
    if rows < 4 or cols < 4:
        raise DomainError("generated landscapes need at least 4 x 4 cells")
    rng = np.random.default_rng(seed)
    g = np.full((rows, cols), "G")
    er, ec = max(1, rows // 3), max(1, cols // 3)
    g[:er, ec:2 * ec + 1] = "E"
    g[rows // 3: 2 * rows // 3, cols - ec:] = "D"
    col = cols // 2 + int(rng.integers(-1, 2))
    for r in range(rows):
        g[r, min(max(col, 1), cols - 2)] = "W"
        if rng.random() < 0.3:
            col += int(rng.choice([-1, 1]))
    # two fords keep both banks connected
    for r in (rows // 4, (3 * rows) // 4):
        g[r][g[r] == "W"] = "G"
    cr, cc = max(2, rows // 4), max(2, cols // 4)
    g[rows - cr:, :cc] = "C"
    noise = rng.random((rows, cols)) < 0.08
    g[noise & (g == "G")] = "E"
    if wind is None:
        wind = Wind(4.0, 45.0)
    if seeds is None and seed_fraction is None:
        seeds = [(0, cols - 1), (0, cols - 2), (1, cols - 1)]
        seeds = [s for s in seeds if g[s] != "W"]
    return Landscape(tuple("".join(r) for r in g), wind, tuple(seeds or ()), seed_fraction)


def params_dict(params: WildfireParams) -> dict:
    return asdict(params)
