"""Trajectory rollouts and the brute-force simulation oracle.

Worst-case quantities are computed by exhaustive enumeration of the
perturbation-policy tree over a finite grid in D, breadth-first with a
node budget.  A truncated run is still a one-sided bound: the truncated
value never overshoots, and the invariance mask stays an outer
approximation of the maximal robust invariant set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .systems import SwitchedSystem, state_margin_many, step, step_many

DEFAULT_NODE_BUDGET = 10_000_000


@dataclass(frozen=True)
class PerturbationGrid:
    """Finite grid of admissible perturbation vectors inside D."""

    points: np.ndarray  # (M, pert_dim)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 1:
            raise ValueError("perturbation grid needs at least one point")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @staticmethod
    def uniform(sys: SwitchedSystem, points_per_axis: int) -> "PerturbationGrid":
        """Uniform lattice over the D bounding box, filtered to D."""
        if points_per_axis < 1:
            raise ValueError("points_per_axis must be >= 1")
        axes = [
            np.linspace(lo, hi, points_per_axis) if points_per_axis > 1
            else np.array([(lo + hi) / 2.0])
            for lo, hi in sys.pert_box
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        keep = np.ones(pts.shape[0], dtype=bool)
        for h in sys.pert_constraints:
            # Tolerate roundoff so box endpoints on the boundary of D stay in.
            keep &= h.eval_many(pts) <= 1e-12
        pts = pts[keep]
        if pts.shape[0] == 0:
            raise ValueError("no lattice point satisfies the perturbation constraints")
        return PerturbationGrid(pts)


@dataclass(frozen=True)
class Trajectory:
    """A rollout; exited_at is the first step index whose state left X0."""

    states: np.ndarray  # (horizon + 1, state_dim)
    exited_at: Optional[int]


def rollout(
    sys: SwitchedSystem,
    x0: Sequence[float],
    policy: Sequence[Sequence[float]],
    horizon: int,
) -> Trajectory:
    """Iterate the step map for `horizon` steps under the given perturbations.

    The first exit from X0 is recorded but iteration continues: the value
    function is defined on all of R^n.
    """
    if len(policy) < horizon:
        raise ValueError(f"policy has {len(policy)} entries, need >= {horizon}")
    x = np.asarray(x0, dtype=float)
    states = [x]
    exited_at = None if sys.in_state_set(x) else 0
    for l in range(horizon):
        x = step(sys, x, policy[l])
        states.append(x)
        if exited_at is None and not sys.in_state_set(x):
            exited_at = l + 1
    return Trajectory(states=np.array(states), exited_at=exited_at)


@dataclass
class EnumerationStats:
    """Bookkeeping for one policy-tree enumeration."""

    nodes: int = 0
    truncated: bool = False


def truncated_value(
    sys: SwitchedSystem,
    x: Sequence[float],
    alpha: float,
    horizon: int,
    pgrid: PerturbationGrid,
    node_budget: int = DEFAULT_NODE_BUDGET,
    stats: EnumerationStats | None = None,
) -> float:
    """Finite-horizon worst-case value: max over the M^H policy tree of
    max_{l<=H} alpha^l * (normalized X0 margin at step l).

    A lower bound of the true value function, nondecreasing in the horizon
    and in perturbation-grid refinement.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if stats is None:
        stats = EnumerationStats()
    frontier = np.asarray(x, dtype=float).reshape(1, sys.state_dim)
    best = float(state_margin_many(sys, frontier)[0])
    stats.nodes += 1
    discount = 1.0
    for _ in range(horizon):
        discount *= alpha
        if frontier.shape[0] * len(pgrid) + stats.nodes > node_budget:
            stats.truncated = True
            break
        children = [step_many(sys, frontier, d) for d in pgrid.points]
        frontier = np.vstack(children)
        stats.nodes += frontier.shape[0]
        best = max(best, discount * float(np.max(state_margin_many(sys, frontier))))
        if best >= discount * alpha:
            # No deeper level can beat the current maximum (margins < 1).
            break
    return best


def estimate_invariant_grid(
    sys: SwitchedSystem,
    state_points: np.ndarray,
    pgrid: PerturbationGrid,
    horizon: int,
    node_budget: int = DEFAULT_NODE_BUDGET,
    stats: EnumerationStats | None = None,
) -> np.ndarray:
    """Mark a point True unless some policy-tree trajectory leaves X0 within
    the horizon.  An OUTER approximation of the maximal robust invariant
    set: finite-horizon search can only certify violation, never safety.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if stats is None:
        stats = EnumerationStats()
    points = np.atleast_2d(np.asarray(state_points, dtype=float))
    npts = points.shape[0]
    mask = np.ones(npts, dtype=bool)

    inside = sys.in_state_set_many(points)
    mask[~inside] = False

    frontier = points[mask]
    owners = np.flatnonzero(mask)
    stats.nodes += npts
    for _ in range(horizon):
        if frontier.shape[0] == 0:
            break
        if stats.nodes + frontier.shape[0] * len(pgrid) > node_budget:
            stats.truncated = True
            break
        children = np.vstack([step_many(sys, frontier, d) for d in pgrid.points])
        child_owners = np.tile(owners, len(pgrid))
        stats.nodes += children.shape[0]
        ok = sys.in_state_set_many(children)
        bad_owners = np.unique(child_owners[~ok])
        mask[bad_owners] = False
        keep = ok & mask[child_owners]
        frontier = children[keep]
        owners = child_owners[keep]
        # Drop duplicate frontier states per owner to curb blow-up.
        if frontier.shape[0] > 1:
            key = np.concatenate(
                [owners[:, None].astype(float), np.round(frontier, 12)], axis=1
            )
            _, unique_idx = np.unique(key, axis=0, return_index=True)
            frontier = frontier[unique_idx]
            owners = owners[unique_idx]
    return mask
