"""Switched discrete-time polynomial systems and the one-step map.

A system is a state constraint set X0 (conjunction of h <= 0), an ordered
partition of the state space into polynomial regions, one polynomial map
per region over (state, perturbation), and a perturbation set D given by
polynomial constraints plus its bounding box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .polynomials import Polynomial

Comparison = Literal["<=", "<"]


class RegionDispatchError(ValueError):
    """No region matched a state: the partition assumption is violated there."""

    def __init__(self, x):
        self.x = np.asarray(x, dtype=float)
        super().__init__(f"no region matches state {self.x.tolist()}")


@dataclass(frozen=True)
class Region:
    """Conjunction of polynomial constraints h(x) <= 0 or h(x) < 0."""

    constraints: tuple[tuple[Polynomial, Comparison], ...]

    def __post_init__(self):
        if not self.constraints:
            raise ValueError("region needs at least one constraint")
        nv = self.constraints[0][0].num_vars
        for h, cmp in self.constraints:
            if h.num_vars != nv:
                raise ValueError("region constraints disagree on variable count")
            if cmp not in ("<=", "<"):
                raise ValueError(f"unknown comparison {cmp!r}")

    @property
    def num_vars(self) -> int:
        return self.constraints[0][0].num_vars

    def contains(self, x: Sequence[float]) -> bool:
        for h, cmp in self.constraints:
            v = h.eval(x)
            if cmp == "<=":
                if not v <= 0.0:
                    return False
            else:
                if not v < 0.0:
                    return False
        return True

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        mask = np.ones(points.shape[0], dtype=bool)
        for h, cmp in self.constraints:
            v = h.eval_many(points)
            mask &= (v <= 0.0) if cmp == "<=" else (v < 0.0)
        return mask


@dataclass(frozen=True)
class SwitchedSystem:
    """State constraints, region partition, per-region dynamics, perturbations."""

    state_dim: int
    pert_dim: int
    x0_constraints: tuple[Polynomial, ...]         # X0: all h(x) <= 0
    regions: tuple[Region, ...]                    # ordered; first match wins
    dynamics: tuple[tuple[Polynomial, ...], ...]   # per region, n polys in (x, d)
    pert_constraints: tuple[Polynomial, ...]       # D: all h(d) <= 0
    pert_box: np.ndarray = field(default=None)     # (m, 2) bounding box of D
    name: str = ""

    def __post_init__(self):
        n, m = self.state_dim, self.pert_dim
        if len(self.regions) != len(self.dynamics) or not self.regions:
            raise ValueError("need |regions| == |dynamics| >= 1")
        for h in self.x0_constraints:
            if h.num_vars != n:
                raise ValueError("X0 constraint variable count != state_dim")
        if not self.x0_constraints:
            raise ValueError("X0 needs at least one constraint")
        for r in self.regions:
            if r.num_vars != n:
                raise ValueError("region variable count != state_dim")
        for fs in self.dynamics:
            if len(fs) != n:
                raise ValueError("each subsystem map needs state_dim components")
            for f in fs:
                if f.num_vars != n + m:
                    raise ValueError("dynamics polynomials must be in (x, d)")
        for h in self.pert_constraints:
            if h.num_vars != m:
                raise ValueError("perturbation constraint variable count != pert_dim")
        box = np.asarray(self.pert_box, dtype=float)
        if box.shape != (m, 2) or np.any(box[:, 0] > box[:, 1]):
            raise ValueError("pert_box must be an (m, 2) array with lo <= hi")
        object.__setattr__(self, "pert_box", box)

    @property
    def num_regions(self) -> int:
        return len(self.regions)

    def in_state_set(self, x: Sequence[float]) -> bool:
        return all(h.eval(x) <= 0.0 for h in self.x0_constraints)

    def in_state_set_many(self, points: np.ndarray) -> np.ndarray:
        mask = np.ones(points.shape[0], dtype=bool)
        for h in self.x0_constraints:
            mask &= h.eval_many(points) <= 0.0
        return mask

    def in_pert_set(self, d: Sequence[float]) -> bool:
        return all(h.eval(d) <= 0.0 for h in self.pert_constraints)


def normalize_constraint_value(h_value):
    """Sign-preserving squashing h / (1 + h^2), always in (-1, 1)."""
    h_value = np.asarray(h_value, dtype=float)
    out = h_value / (1.0 + h_value * h_value)
    return float(out) if out.ndim == 0 else out


def state_margin(sys: SwitchedSystem, x: Sequence[float]) -> float:
    """max_j of the normalized X0 constraint values at x."""
    return max(normalize_constraint_value(h.eval(x)) for h in sys.x0_constraints)


def state_margin_many(sys: SwitchedSystem, points: np.ndarray) -> np.ndarray:
    vals = [normalize_constraint_value(h.eval_many(points)) for h in sys.x0_constraints]
    return np.max(vals, axis=0)


def region_of(sys: SwitchedSystem, x: Sequence[float]) -> int:
    """1-based index of the first region containing x, in declared order."""
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.state_dim,):
        raise ValueError(f"state has shape {x.shape}, expected ({sys.state_dim},)")
    for i, region in enumerate(sys.regions):
        if region.contains(x):
            return i + 1
    raise RegionDispatchError(x)


def region_of_many(sys: SwitchedSystem, points: np.ndarray) -> np.ndarray:
    """Vectorized region dispatch; 0 marks states with no matching region."""
    points = np.asarray(points, dtype=float)
    out = np.zeros(points.shape[0], dtype=np.int64)
    for i, region in enumerate(sys.regions):
        undecided = out == 0
        if not np.any(undecided):
            break
        hit = region.contains_many(points[undecided])
        idx = np.flatnonzero(undecided)[hit]
        out[idx] = i + 1
    return out


def step(sys: SwitchedSystem, x: Sequence[float], d: Sequence[float]) -> np.ndarray:
    """One step of the switched dynamics: f_{region_of(x)}(x, d)."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    if d.shape != (sys.pert_dim,):
        raise ValueError(f"perturbation has shape {d.shape}, expected ({sys.pert_dim},)")
    i = region_of(sys, x)
    xd = np.concatenate([x, d])
    return np.array([f.eval(xd) for f in sys.dynamics[i - 1]])


def step_many(sys: SwitchedSystem, points: np.ndarray, d: Sequence[float]) -> np.ndarray:
    """Vectorized one-step map under a single perturbation vector.

    Raises RegionDispatchError if any state matches no region.
    """
    points = np.asarray(points, dtype=float)
    d = np.asarray(d, dtype=float)
    regions = region_of_many(sys, points)
    if np.any(regions == 0):
        raise RegionDispatchError(points[np.argmax(regions == 0)])
    out = np.empty_like(points)
    dcols = np.broadcast_to(d, (points.shape[0], sys.pert_dim))
    xd = np.hstack([points, dcols])
    for i in range(sys.num_regions):
        sel = regions == i + 1
        if not np.any(sel):
            continue
        sub = xd[sel]
        for j, f in enumerate(sys.dynamics[i]):
            out[sel, j] = f.eval_many(sub)
    return out


@dataclass(frozen=True)
class PartitionReport:
    """Sampled check of the region-partition and X0 nonemptiness assumptions."""

    samples: int
    uncovered: int        # states matched by no region
    overlapping: int      # states matched by two or more regions
    x0_hits: int          # sampled states inside X0

    @property
    def ok(self) -> bool:
        return self.uncovered == 0 and self.overlapping == 0


def validate_system(
    sys: SwitchedSystem,
    state_box: np.ndarray,
    samples: int = 10_000,
    seed: int = 0,
) -> PartitionReport:
    """Stochastic audit: every sampled state should be in exactly one region."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    state_box = np.asarray(state_box, dtype=float)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(state_box[:, 0], state_box[:, 1], size=(samples, sys.state_dim))
    counts = np.zeros(samples, dtype=np.int64)
    for region in sys.regions:
        counts += region.contains_many(pts)
    x0_hits = int(np.count_nonzero(sys.in_state_set_many(pts)))
    return PartitionReport(
        samples=samples,
        uncovered=int(np.count_nonzero(counts == 0)),
        overlapping=int(np.count_nonzero(counts >= 2)),
        x0_hits=x0_hits,
    )
