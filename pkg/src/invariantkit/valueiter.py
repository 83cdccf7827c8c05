"""Grid value iteration for the worst-case Bellman fixed point.

The backup is synchronous (double-buffered) so successive sweeps contract
at rate alpha in the sup norm; interpolation off the lattice is
multilinear, and queries outside the grid box conservatively return the
global upper bound 1, which can only shrink the computed zero set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .simulate import PerturbationGrid
from .systems import SwitchedSystem, state_margin_many, step_many

NODE_BUDGET = 100_000_000


class GridBudgetError(ValueError):
    """Requested lattice exceeds the node budget; refuse instead of OOM."""


@dataclass(frozen=True)
class StateGrid:
    """Uniform rectangular lattice including both box endpoints per axis."""

    box: np.ndarray         # (n, 2)
    resolution: np.ndarray  # (n,) node counts

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float)
        res = np.asarray(self.resolution, dtype=np.int64)
        if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 0] >= box[:, 1]):
            raise ValueError("box must be (n, 2) with lo < hi per dimension")
        if res.shape != (box.shape[0],) or np.any(res < 2):
            raise ValueError("resolution must give >= 2 nodes per dimension")
        total = int(np.prod(res.astype(object)))
        if total > NODE_BUDGET:
            raise GridBudgetError(
                f"grid would have {total:.3g} nodes, above the budget of "
                f"{NODE_BUDGET:.3g}; value iteration is refused at this size "
                "(use the SOS pipeline for high-dimensional systems)"
            )
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "resolution", res)

    @property
    def dim(self) -> int:
        return self.box.shape[0]

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def spacing(self) -> np.ndarray:
        return (self.box[:, 1] - self.box[:, 0]) / (self.resolution - 1)

    def axes(self) -> list[np.ndarray]:
        return [
            np.linspace(lo, hi, r)
            for (lo, hi), r in zip(self.box, self.resolution)
        ]

    def nodes(self) -> np.ndarray:
        """All lattice nodes as an (N, n) array, C-ordered."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def build_grid(box, resolution) -> StateGrid:
    box = np.asarray(box, dtype=float)
    resolution = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (box.shape[0],))
    return StateGrid(box=box, resolution=resolution)


@dataclass(frozen=True)
class ValueField:
    """Values of the (approximate) value function on a state grid."""

    grid: StateGrid
    values: np.ndarray  # shaped like grid.resolution

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != tuple(self.grid.resolution):
            vals = vals.reshape(tuple(self.grid.resolution))
        object.__setattr__(self, "values", vals)

    @staticmethod
    def zeros(grid: StateGrid) -> "ValueField":
        return ValueField(grid=grid, values=np.zeros(tuple(grid.resolution)))


def interpolate(field: ValueField, x) -> np.ndarray | float:
    """Multilinear interpolation; points outside the box return 1.0."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    grid = field.grid
    n = grid.dim
    lo, hi = grid.box[:, 0], grid.box[:, 1]
    h = grid.spacing
    outside = np.any((pts < lo) | (pts > hi), axis=1)

    t = (pts - lo) / h
    cell = np.clip(np.floor(t).astype(np.int64), 0, grid.resolution - 2)
    frac = np.clip(t - cell, 0.0, 1.0)

    out = np.zeros(pts.shape[0])
    for corner in range(1 << n):
        offs = np.array([(corner >> j) & 1 for j in range(n)], dtype=np.int64)
        weight = np.ones(pts.shape[0])
        for j in range(n):
            weight *= frac[:, j] if offs[j] else (1.0 - frac[:, j])
        idx = tuple((cell[:, j] + offs[j]) for j in range(n))
        out += weight * field.values[idx]
    out[outside] = 1.0
    return float(out[0]) if single else out


@dataclass(frozen=True)
class ViConfig:
    """Value-iteration parameters; alpha == 1 is refused (no contraction)."""

    alpha: float
    epsilon: float
    pgrid: PerturbationGrid
    max_iters: int = 1000
    initial: Optional[ValueField] = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(
                f"alpha must lie strictly inside (0, 1), got {self.alpha}; "
                "iteration does not converge at alpha == 1"
            )
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


def _images_and_margins(sys: SwitchedSystem, grid: StateGrid, pgrid: PerturbationGrid):
    nodes = grid.nodes()
    images = np.stack([step_many(sys, nodes, d) for d in pgrid.points])
    margins = state_margin_many(sys, nodes)
    return images, margins


def bellman_backup(
    sys: SwitchedSystem,
    fld: ValueField,
    cfg: ViConfig,
    _images: np.ndarray | None = None,
    _margins: np.ndarray | None = None,
) -> ValueField:
    """One synchronous sweep of the backup operator; the input is unmodified."""
    if _images is None or _margins is None:
        _images, _margins = _images_and_margins(sys, fld.grid, cfg.pgrid)
    best = np.full(fld.grid.num_nodes, -np.inf)
    for k in range(len(cfg.pgrid)):
        np.maximum(best, interpolate(fld, _images[k]), out=best)
    new_vals = np.maximum(cfg.alpha * best, _margins)
    return ValueField(grid=fld.grid, values=new_vals)


@dataclass(frozen=True)
class ViResult:
    field: ValueField
    iterations: int
    final_delta: float
    deltas: tuple[float, ...]
    converged: bool


def solve_value_iteration(
    sys: SwitchedSystem, grid: StateGrid, cfg: ViConfig
) -> ViResult:
    """Iterate the backup from V0 (zeros by default) until the sup-norm delta
    drops below epsilon or max_iters is hit."""
    images, margins = _images_and_margins(sys, grid, cfg.pgrid)
    fld = cfg.initial if cfg.initial is not None else ValueField.zeros(grid)
    deltas: list[float] = []
    converged = False
    for _ in range(cfg.max_iters):
        new = bellman_backup(sys, fld, cfg, _images=images, _margins=margins)
        delta = float(np.max(np.abs(new.values - fld.values)))
        deltas.append(delta)
        fld = new
        if delta < cfg.epsilon:
            converged = True
            break
    return ViResult(
        field=fld,
        iterations=len(deltas),
        final_delta=deltas[-1] if deltas else 0.0,
        deltas=tuple(deltas),
        converged=converged,
    )


def dp_residual(
    sys: SwitchedSystem,
    fld: ValueField,
    cfg: ViConfig,
    pgrid: PerturbationGrid | None = None,
) -> float:
    """Worst node violation of min{min_d(V - a*V(f)), V - max_j h'} = 0."""
    pgrid = pgrid if pgrid is not None else cfg.pgrid
    images, margins = _images_and_margins(sys, fld.grid, pgrid)
    vals = fld.values.ravel()
    worst_step = np.full(fld.grid.num_nodes, np.inf)
    for k in range(len(pgrid)):
        np.minimum(
            worst_step, vals - cfg.alpha * interpolate(fld, images[k]), out=worst_step
        )
    residual = np.minimum(worst_step, vals - margins)
    return float(np.max(np.abs(residual)))


@dataclass(frozen=True)
class ZeroSet:
    mask: np.ndarray                      # shaped like the grid, True = inside
    contours: tuple[np.ndarray, ...]      # 2-D only: (k, 2) polylines, else empty


def extract_zero_set(fld: ValueField, tol: float) -> ZeroSet:
    """Nodes with value <= tol, plus the tol-level contour for 2-D fields."""
    if tol < 0.0:
        raise ValueError("tol must be >= 0")
    mask = fld.values <= tol
    contours: tuple[np.ndarray, ...] = ()
    if fld.grid.dim == 2:
        xs, ys = fld.grid.axes()
        segments = _marching_squares(xs, ys, fld.values, tol)
        contours = tuple(_chain_segments(segments))
    return ZeroSet(mask=mask, contours=contours)


def _edge_point(p1, p2, v1, v2, level):
    t = 0.5 if v2 == v1 else (level - v1) / (v2 - v1)
    return (p1[0] + t * (p2[0] - p1[0]), p1[1] + t * (p2[1] - p1[1]))


def _marching_squares(xs, ys, values, level):
    """Level-set segments via the 16-case marching-squares table."""
    segments = []
    nx, ny = values.shape
    for i in range(nx - 1):
        for j in range(ny - 1):
            corners = [
                ((xs[i], ys[j]), values[i, j]),
                ((xs[i + 1], ys[j]), values[i + 1, j]),
                ((xs[i + 1], ys[j + 1]), values[i + 1, j + 1]),
                ((xs[i], ys[j + 1]), values[i, j + 1]),
            ]
            case = 0
            for k, (_, v) in enumerate(corners):
                if v <= level:
                    case |= 1 << k
            if case in (0, 15):
                continue
            # Crossing points on the four cell edges (0-1, 1-2, 2-3, 3-0).
            pts = {}
            for k in range(4):
                (pa, va), (pb, vb) = corners[k], corners[(k + 1) % 4]
                if (va <= level) != (vb <= level):
                    pts[k] = _edge_point(pa, pb, va, vb, level)
            edges = sorted(pts)
            if len(edges) == 2:
                segments.append((pts[edges[0]], pts[edges[1]]))
            elif len(edges) == 4:
                # Saddle: resolve by the cell-center average.
                center = np.mean([v for _, v in corners])
                if (center <= level) == bool(case & 1):
                    segments.append((pts[0], pts[1]))
                    segments.append((pts[2], pts[3]))
                else:
                    segments.append((pts[0], pts[3]))
                    segments.append((pts[1], pts[2]))
    return segments


def _chain_segments(segments, decimals: int = 9):
    """Greedily join shared endpoints into polylines."""
    if not segments:
        return []
    adj: dict[tuple, list[int]] = {}
    for idx, (a, b) in enumerate(segments):
        adj.setdefault(tuple(np.round(a, decimals)), []).append(idx)
        adj.setdefault(tuple(np.round(b, decimals)), []).append(idx)
    used = [False] * len(segments)
    polylines = []
    for start in range(len(segments)):
        if used[start]:
            continue
        used[start] = True
        a, b = segments[start]
        chain = [a, b]
        for head in (1, 0):
            while True:
                key = tuple(np.round(chain[-1 if head else 0], decimals))
                nxt = next((i for i in adj.get(key, []) if not used[i]), None)
                if nxt is None:
                    break
                used[nxt] = True
                p, q = segments[nxt]
                point = q if tuple(np.round(p, decimals)) == key else p
                if head:
                    chain.append(point)
                else:
                    chain.insert(0, point)
        polylines.append(np.array(chain))
    return polylines
