"""Sum-of-squares synthesis of robust invariant set certificates.

A polynomial u over the state variables is sought so that, on an
origin-centered ball B enclosing everything reachable from X0 in one
step, (1) u(x) - alpha*u(f_i(x,d)) >= 0 on each region-restricted
subsystem for all admissible perturbations and (2) the zero-sublevel
set of u lies inside X0.  Both conditions are imposed via Putinar-style
SOS multipliers, compiled to a standard-form semidefinite program whose
objective minimizes the integral of u over B, and checked after the
solve by dense sampling.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .polynomials import Exponents, Polynomial, lift
from .sdp import (
    SdpOptions,
    SdpSolution,
    SdpStandardForm,
    solve_sdp,
    solve_sdp_clarabel,
    solve_sdp_scs,
)
from .simulate import PerturbationGrid
from .systems import Region, SwitchedSystem, region_of_many, step_many

# Gram blocks above this side are refused by compile_to_sdp.
DEFAULT_BLOCK_LIMIT = 2000

# Compiled certificate programs beyond this many equality rows go to the
# first-order backend under backend="auto": the dense interior-point
# method loses dual attainment well before its Schur complement stops
# fitting in memory on these weakly-degenerate instances.
AUTO_EMBEDDED_MAX_CONSTRAINTS = 400

VERIFY_MARGIN_TOL = 1e-6


def monomial_basis(num_vars: int, max_degree: int) -> tuple[Exponents, ...]:
    """All exponent tuples of total degree <= max_degree, graded-lex order."""
    if num_vars < 1 or max_degree < 0:
        raise ValueError("need num_vars >= 1 and max_degree >= 0")
    out = []
    for total in range(max_degree + 1):
        for bars in itertools.combinations(range(total + num_vars - 1), num_vars - 1):
            cuts = (-1,) + bars + (total + num_vars - 1,)
            exps = tuple(cuts[i + 1] - cuts[i] - 1 for i in range(num_vars))
            out.append(exps)
    return tuple(sorted(out, key=lambda e: (sum(e), e)))


def _monomials(num_vars: int, max_degree: int) -> tuple[Polynomial, ...]:
    return tuple(Polynomial.monomial(b) for b in monomial_basis(num_vars, max_degree))


# Residual/constraint tolerance for admissible fixed points of the dynamics.
FIXED_POINT_TOL = 1e-9


def _fixed_points(
    sys: SwitchedSystem, index: int, R: float, starts: int = 120, cap: int = 400
) -> np.ndarray:
    """Admissible fixed points (x, d) of subsystem `index` (1-based):
    f_i(x, d) = x with x in the ball closure and region i, d in D.

    Deterministic multi-start least squares locates solutions; each is
    polished to machine precision, and positive-dimensional fixed sets are
    traced by stepping along the Jacobian's tangent space and re-polishing,
    so the samples cover the whole set rather than clustering.
    """
    from scipy.optimize import least_squares

    n = sys.state_dim
    maps = sys.dynamics[index - 1]
    region = sys.regions[index - 1]
    r = math.sqrt(R)
    lo = np.concatenate([np.full(n, -r), sys.pert_box[:, 0]])
    hi = np.concatenate([np.full(n, r), sys.pert_box[:, 1]])
    span = hi - lo
    nv = lo.shape[0]
    partials = [[f.partial(i) for i in range(nv)] for f in maps]

    def resid(z):
        return np.array([f.eval(z) for f in maps]) - z[:n]

    def jac(z):
        J = np.array([[p.eval(z) for p in row] for row in partials])
        J[:, :n] -= np.eye(n)
        return J

    def polish(z0):
        try:
            # Degenerate trust-region steps inside the solver divide by zero
            # harmlessly; keep the noise out of caller stderr.
            with np.errstate(divide="ignore", invalid="ignore"):
                sol = least_squares(
                    resid, z0, jac=jac, method="trf", xtol=None, ftol=None,
                    gtol=1e-15, max_nfev=200,
                )
        except Exception:
            return None
        z = np.clip(sol.x, lo, hi)
        if float(np.dot(resid(z), resid(z))) > 1e-22:
            return None
        x, d = z[:n], z[n:]
        if float(np.dot(x, x)) > R + FIXED_POINT_TOL:
            return None
        if any(h.eval(x) > FIXED_POINT_TOL for h, _ in region.constraints):
            return None
        if any(h.eval(d) > FIXED_POINT_TOL for h in sys.pert_constraints):
            return None
        return z

    rng = np.random.default_rng(0)
    found: list[np.ndarray] = []
    for _ in range(starts):
        z = polish(lo + span * rng.random(nv))
        if z is not None:
            found.append(z)
    # Trace positive-dimensional components: step along the tangent space
    # (Jacobian null directions) and re-polish back onto the set.
    seeds = list(found)
    for z in seeds:
        _, sv, Vt = np.linalg.svd(jac(z))
        tangent = Vt[np.concatenate([sv, np.zeros(nv - sv.shape[0])]) < 1e-8]
        if tangent.shape[0] == 0:
            continue
        for _ in range(6):
            step = rng.standard_normal(tangent.shape[0])
            z2 = polish(z + 0.5 * max(span) * (step @ tangent))
            if z2 is not None:
                found.append(z2)
    if not found:
        return np.zeros((0, nv))
    pts = np.unique(np.round(np.array(found), 9), axis=0)
    return pts[:cap]


def _restrict_basis(
    basis: Sequence[Polynomial], rows: np.ndarray, rank_tol: float = 1e-7
) -> tuple[Polynomial, ...]:
    """Sparse basis of the null space {w : rows @ w = 0} in span(basis).

    Column-pivoted QR selects a well-conditioned pivot subset; each
    returned polynomial is one non-pivot basis element corrected by at
    most rank(rows) pivot elements, so the compiled SDP stays sparse.
    Near-zero correction coefficients are dropped.
    """
    import scipy.linalg as sla

    Q, Rm, perm = sla.qr(np.asarray(rows, dtype=float), mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rm))
    if diag.size == 0 or diag[0] == 0.0:
        return tuple(basis)
    rank = int(np.count_nonzero(diag > rank_tol * diag[0]))
    if rank == 0:
        return tuple(basis)
    pivots, free = perm[:rank], perm[rank:]
    C = sla.solve_triangular(Rm[:rank, :rank], Rm[:rank, rank:])
    out = []
    for k in np.argsort(free):
        j = free[k]
        poly = basis[j]
        for i, pi in enumerate(pivots):
            c = -C[i, k]
            if abs(c) > 1e-11:
                poly = poly + c * basis[pi]
        out.append(poly)
    return tuple(out)


def _vanishing_basis(
    basis: Sequence[Polynomial], points: np.ndarray
) -> tuple[Polynomial, ...]:
    """Sparse basis of the subspace of span(basis) vanishing at `points`."""
    Z = np.stack([p.eval_many(points) for p in basis], axis=1)
    return _restrict_basis(basis, Z)


def compute_ball(sys: SwitchedSystem, state_box) -> float:
    """Squared radius R of an origin-centered ball covering the one-step
    reachable enclosure of the state box, padded by 5%.

    The enclosure is the interval-arithmetic image of every subsystem map
    over (state_box x pert_box), united with state_box itself.
    """
    box = np.asarray(state_box, dtype=float)
    if box.shape != (sys.state_dim, 2) or np.any(box[:, 0] > box[:, 1]):
        raise ValueError("state_box must be (n, 2) with lo <= hi")
    lo = np.concatenate([box[:, 0], sys.pert_box[:, 0]])
    hi = np.concatenate([box[:, 1], sys.pert_box[:, 1]])
    enc_lo, enc_hi = box[:, 0].copy(), box[:, 1].copy()
    for maps in sys.dynamics:
        for j, f in enumerate(maps):
            f_lo, f_hi = f.interval_eval(lo, hi)
            enc_lo[j] = min(enc_lo[j], f_lo)
            enc_hi[j] = max(enc_hi[j], f_hi)
    if not (np.all(np.isfinite(enc_lo)) and np.all(np.isfinite(enc_hi))):
        raise ValueError("one-step enclosure is unbounded")
    radius_sq = float(np.sum(np.maximum(enc_lo**2, enc_hi**2)))
    return 1.05 * radius_sq


def ball_moments(n: int, R: float, max_degree: int) -> dict[Exponents, float]:
    """Monomial integrals over the ball of squared radius R in R^n.

    Odd monomials vanish by symmetry; for even exponents a the integral
    factors into a sphere moment 2*prod(Gamma((a_i+1)/2))/Gamma((|a|+n)/2)
    times the radial part r^(|a|+n)/(|a|+n) with r = sqrt(R).
    """
    if R <= 0.0:
        raise ValueError("R must be positive")
    r = math.sqrt(R)
    out: dict[Exponents, float] = {}
    for a in monomial_basis(n, max_degree):
        if any(e % 2 for e in a):
            out[a] = 0.0
            continue
        total = sum(a)
        sphere = 2.0 * math.prod(
            math.gamma((e + 1) / 2.0) for e in a
        ) / math.gamma((total + n) / 2.0)
        out[a] = sphere * r ** (total + n) / (total + n)
    return out


@dataclass(frozen=True)
class SosSlot:
    """One SOS unknown: a Gram matrix over a polynomial `basis`, entering
    its row's identity multiplied by `factor` (sign folded in).

    The basis starts as plain monomials; facial reduction may replace it
    with sparse monomial combinations that vanish on the fixed-point set
    of the dynamics (see build_sos_program)."""

    label: str
    basis: tuple[Polynomial, ...]
    factor: Polynomial  # in the row's variable space

    @property
    def side(self) -> int:
        return len(self.basis)


@dataclass(frozen=True)
class SosRow:
    """A single SOS constraint row of the synthesis program.

    The identity enforced per monomial is

        sum_slots GramForm(slot) * slot.factor  -  L(c)  =  rhs

    where L maps the certificate coefficients c into the row's variable
    space (u(x) - alpha*u(f_i(x,d)) for dynamic rows, (1 + h0j^2)*u(x)
    for state rows) and rhs collects the constant part.
    """

    label: str
    num_vars: int
    slots: tuple[SosSlot, ...]
    c_images: tuple[Polynomial, ...]  # image of each u-basis monomial under L
    rhs: Polynomial
    region: Optional[int] = None      # 1-based subsystem index, dynamic rows
    x0_index: Optional[int] = None    # 0-based X0 constraint index, state rows


@dataclass(frozen=True)
class SosProgram:
    """The full synthesis program: certificate basis, rows, objective.

    `sys` and the rows live in ball-normalized coordinates y = x / scale
    (the enclosing ball is the unit ball there); `R` is the squared
    radius of the original ball and `scale` its radius.  The objective
    weights are arranged so the reported optimum is the integral of the
    certificate over the *original* ball, and recover_certificate maps
    everything back to the original coordinates.
    """

    sys: SwitchedSystem
    alpha: float
    R: float
    d_u: int
    d_s: int
    d_sp: int
    u_basis: tuple[Exponents, ...]
    rows: tuple[SosRow, ...]
    objective: np.ndarray  # moment weights aligned with u_basis
    scale: float = 1.0

    @property
    def num_coefficients(self) -> int:
        return len(self.u_basis)


def _even(degree: int, what: str) -> int:
    if degree % 2:
        warnings.warn(
            f"{what} degree {degree} is odd; raised to {degree + 1} "
            "(SOS blocks need even degree)",
            stacklevel=3,
        )
        return degree + 1
    return degree


def _state_rescale(p: Polynomial, factor: float, nstate: int) -> Polynomial:
    """Substitute x -> factor * x in the first nstate variables."""
    if factor == 1.0:
        return p
    return Polynomial(
        p.num_vars,
        {e: c * factor ** sum(e[:nstate]) for e, c in p.terms.items()},
    )


def _normalized_system(sys: SwitchedSystem, r: float) -> SwitchedSystem:
    """The same system in ball coordinates y = x / r.

    Dynamics become y+ = f(r*y, d) / r; region and state-set polynomials
    are composed with x = r*y, which leaves their sign pattern (and hence
    the partition and X0 membership) pointwise identical."""
    n = sys.state_dim
    inv = 1.0 / r
    return dataclasses.replace(
        sys,
        dynamics=tuple(
            tuple(_state_rescale(f, r, n) * inv for f in maps)
            for maps in sys.dynamics
        ),
        regions=tuple(
            Region(
                tuple((_state_rescale(h, r, n), cmp) for h, cmp in reg.constraints)
            )
            for reg in sys.regions
        ),
        x0_constraints=tuple(_state_rescale(h, r, n) for h in sys.x0_constraints),
    )


def build_sos_program(
    sys: SwitchedSystem,
    alpha: float,
    d_u: int,
    d_s: int,
    d_sp: int,
    state_box,
    facial_reduction: bool = True,
) -> SosProgram:
    """Assemble the synthesis program for the given degrees.

    One dynamic row per subsystem (SOS in state and perturbation
    variables, with multipliers for the region, the perturbation set and
    the ball) and one state row per X0 constraint (SOS in the state
    variables, with a ball multiplier).  Strict region inequalities are
    treated as non-strict; constant region constraints get no multiplier.

    With alpha == 1 (the default synthesis setting) the admissible fixed
    points of each subsystem force every dynamic-row SOS block onto a face
    of its cone; `facial_reduction` restricts the affected bases so the
    compiled SDP regains a strictly feasible interior (fixed points are
    located numerically and the restriction only shrinks the feasible set,
    so soundness of any recovered certificate is unaffected).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if min(d_u, d_s, d_sp) < 1:
        raise ValueError("degrees must be positive")
    if d_u % 2:
        raise ValueError(f"certificate degree d_u must be even, got {d_u}")
    d_s = _even(d_s, "multiplier")
    d_sp = _even(d_sp, "state multiplier")

    n, m = sys.state_dim, sys.pert_dim
    nv = n + m
    R = compute_ball(sys, state_box)
    # The program is assembled in ball coordinates y = x / sqrt(R): the
    # enclosing ball becomes the unit ball, so Gram blocks and equality
    # rows stop mixing the wildly different magnitudes of low- and
    # high-degree monomial coefficients (on a radius-3 ball in 7 variables
    # a degree-8 row otherwise spans four orders of magnitude, which
    # stalls every solver tried).  recover_certificate maps the
    # certificate back, and the moment weights below are chosen so the
    # reported objective equals the integral over the original ball.
    scale = math.sqrt(R)
    work = _normalized_system(sys, scale) if scale != 1.0 else sys
    h_ball = Polynomial(
        n, {(0,) * n: 1.0, **{tuple(2 if j == i else 0 for j in range(n)): -1.0 for i in range(n)}}
    )
    u_basis = monomial_basis(n, d_u)
    rows: list[SosRow] = []

    mult_basis = _monomials(nv, d_s // 2)
    for i, (region, maps) in enumerate(zip(work.regions, work.dynamics), start=1):
        c_images = []
        for b in u_basis:
            mono = Polynomial.monomial(b)
            c_images.append(lift(mono, nv) - alpha * mono.compose(list(maps)))
        deg_image = max(p.degree() for p in c_images)
        slots = [("gram", Polynomial.constant(nv, 1.0), None)]
        for l, (h, _) in enumerate(region.constraints, start=1):
            if h.degree() == 0:
                continue  # constant constraint carries no information
            slots.append((f"region{l}", -lift(h, nv), h.degree()))
        for l, h in enumerate(work.pert_constraints, start=1):
            if h.degree() == 0:
                continue
            slots.append((f"pert{l}", -lift(h, nv, offset=n), h.degree()))
        slots.append(("ball", lift(h_ball, nv), 2))
        row_deg = max(
            [deg_image] + [d_s + d for _, _, d in slots if d is not None]
        )
        row_deg = _even(row_deg, f"dynamic row {i}")
        built = []
        for name, factor, _ in slots:
            basis = _monomials(nv, row_deg // 2) if name == "gram" else mult_basis
            built.append(SosSlot(label=f"dyn{i}.{name}", basis=basis, factor=factor))
        # At alpha == 1, L(c) vanishes at every admissible fixed point of the
        # subsystem, so the row identity there is a sum of (SOS value) times
        # (nonnegative factor value) terms summing to zero: each slot whose
        # factor is strictly positive at the point is forced onto a face of
        # its PSD cone.  Restricting the bases to polynomials that vanish at
        # those points removes the faces; without this no interior-point
        # method has a strictly feasible region to walk through.
        if facial_reduction and alpha == 1.0:
            pts = _fixed_points(work, i, 1.0)
            if pts.shape[0]:
                reduced = []
                for slot in built:
                    keep = pts[slot.factor.eval_many(pts) > FIXED_POINT_TOL]
                    basis = (
                        _vanishing_basis(slot.basis, keep)
                        if keep.shape[0]
                        else slot.basis
                    )
                    reduced.append(
                        SosSlot(label=slot.label, basis=basis, factor=slot.factor)
                    )
                built = reduced
        rows.append(
            SosRow(
                label=f"dyn{i}",
                num_vars=nv,
                slots=tuple(built),
                c_images=tuple(c_images),
                rhs=Polynomial.zero(nv),
                region=i,
            )
        )

    sp_basis = _monomials(n, d_sp // 2)
    for j, h0 in enumerate(work.x0_constraints, start=1):
        weight = Polynomial.constant(n, 1.0) + h0 * h0
        c_images = [weight * Polynomial.monomial(b) for b in u_basis]
        row_deg = max(
            max(p.degree() for p in c_images), d_sp + 2, h0.degree()
        )
        row_deg = _even(row_deg, f"state row {j}")
        built = (
            SosSlot(
                label=f"state{j}.gram",
                basis=_monomials(n, row_deg // 2),
                factor=Polynomial.constant(n, 1.0),
            ),
            SosSlot(label=f"state{j}.ball", basis=sp_basis, factor=h_ball),
        )
        rows.append(
            SosRow(
                label=f"state{j}",
                num_vars=n,
                slots=built,
                c_images=tuple(c_images),
                rhs=-h0,
                x0_index=j - 1,
            )
        )

    # Weight b of the normalized coefficient c'_b = c_b * scale^|b| is the
    # original-ball moment divided by scale^|b|, so the objective value is
    # the integral of u over the original ball, unchanged by normalization.
    moments = ball_moments(n, R, d_u)
    objective = np.array(
        [moments[b] * scale ** -sum(b) for b in u_basis]
    )
    return SosProgram(
        sys=work,
        alpha=alpha,
        R=R,
        d_u=d_u,
        d_s=d_s,
        d_sp=d_sp,
        u_basis=u_basis,
        rows=tuple(rows),
        objective=objective,
        scale=scale,
    )


@dataclass(frozen=True)
class SdpProblem:
    """Compiled program: standard-form SDP plus recovery metadata."""

    form: SdpStandardForm
    program: SosProgram
    block_labels: tuple[str, ...]
    slot_blocks: dict[str, int]  # slot label -> block index


def _row_support(row: SosRow, bases: list[list[Polynomial]]):
    """Monomial-indexed contributions of one row: Gram entries keyed by
    (slot index, p, q), free-coefficient entries, and the constant part."""
    ents: dict[Exponents, dict[tuple[int, int, int], float]] = {}
    frees: dict[Exponents, dict[int, float]] = {}
    rhs: dict[Exponents, float] = {}
    for a, v in row.rhs.terms.items():
        rhs[a] = rhs.get(a, 0.0) + v
    for si, slot in enumerate(row.slots):
        basis = bases[si]
        factor_terms = list(slot.factor.terms.items())
        for p in range(len(basis)):
            for q in range(p, len(basis)):
                key = (si, p, q)
                for e1, c1 in basis[p].terms.items():
                    for e2, c2 in basis[q].terms.items():
                        c12 = c1 * c2
                        for e3, fc in factor_terms:
                            a = tuple(
                                x + y + z for x, y, z in zip(e1, e2, e3)
                            )
                            d = ents.setdefault(a, {})
                            d[key] = d.get(key, 0.0) + c12 * fc
    for ci, image in enumerate(row.c_images):
        for a, v in image.terms.items():
            d = frees.setdefault(a, {})
            d[ci] = d.get(ci, 0.0) - v
    return ents, frees, rhs


# Contributions below this size are float cancellation noise, not structure.
_STRUCT_TOL = 1e-12


def _prune_bases(row: SosRow) -> list[list[Polynomial]]:
    """Drop Gram basis elements whose diagonal is structurally forced to 0.

    If a monomial of the identity receives contributions only from diagonal
    Gram positions whose coefficients all share one sign, the matched
    equality forces those diagonal entries (hence whole rows of the PSD
    blocks) to vanish.  Removing such basis elements up front restores a
    strictly feasible interior, without which interior-point solvers stall.
    """
    bases = [list(slot.basis) for slot in row.slots]
    while True:
        ents, frees, rhs = _row_support(row, bases)
        doomed: set[tuple[int, int]] = set()
        for a, contrib in ents.items():
            if any(abs(v) > _STRUCT_TOL for v in frees.get(a, {}).values()):
                continue
            if abs(rhs.get(a, 0.0)) > _STRUCT_TOL:
                continue
            live = {k: v for k, v in contrib.items() if abs(v) > _STRUCT_TOL}
            if not live or any(p != q for _, p, q in live):
                continue
            signs = {v > 0.0 for v in live.values()}
            if len(signs) != 1:
                continue
            for si, p, _ in live:
                doomed.add((si, p))
        if not doomed:
            return bases
        for si in range(len(bases)):
            bases[si] = [
                b for p, b in enumerate(bases[si]) if (si, p) not in doomed
            ]


PRESOLVE_MAX_ROWS = 4000


def _drop_dependent_rows(
    form: SdpStandardForm, rel_tol: float = 1e-9
) -> SdpStandardForm:
    """Presolve: remove (near-)linearly dependent equality constraints.

    Basis restriction can leave coefficient-matching rows that are exact
    or near combinations of others; a singular constraint set stalls any
    interior-point method.  Rows are selected by column-pivoted QR on a
    Gaussian sketch of the sparse constraint matrix, which preserves the
    row space and singular values to sketching accuracy while keeping
    memory at O(m^2) regardless of the number of matrix entries.  Dropped
    rows are combinations of the kept ones whenever the problem is
    feasible; the recovered certificate is re-verified against the full
    row identities downstream either way.
    """
    import scipy.linalg
    import scipy.sparse as sp

    m = form.m
    if m == 0 or m > PRESOLVE_MAX_ROWS:
        # The pivoted QR is cubic in m.  Redundant rows only stall the
        # interior-point backends, and problems this large go to the
        # first-order backend anyway, which tolerates them.
        return form
    offs = np.cumsum([0] + [s * (s + 1) // 2 for s in form.block_sizes])
    data, rows, cols = [], [], []
    r2 = math.sqrt(2.0)
    for k in range(m):
        for blk, i, j, v in form.constraints[k]:
            if i > j:
                i, j = j, i
            rows.append(k)
            cols.append(offs[blk] + j * (j + 1) // 2 + i)
            data.append(v if i == j else r2 * v)
        for idx, v in form.free_constraints[k] if form.free_constraints else []:
            rows.append(k)
            cols.append(offs[-1] + idx)
            data.append(v)
    ncols = int(offs[-1]) + form.free_dim
    A = sp.csr_matrix((data, (rows, cols)), shape=(m, ncols))
    rng = np.random.default_rng(0)
    sketch = np.empty((m, min(ncols, m + 8)))
    if ncols <= m + 8:
        sketch = A.toarray()
    else:
        # Accumulate A @ Omega in column chunks to bound the dense footprint.
        sketch[:] = 0.0
        step = max(1, min(ncols, 2_000_000 // max(sketch.shape[1], 1)))
        for lo in range(0, ncols, step):
            hi = min(ncols, lo + step)
            omega = rng.standard_normal((hi - lo, sketch.shape[1]))
            sketch += A[:, lo:hi] @ omega
    _, rmat, piv = scipy.linalg.qr(sketch.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rmat))
    rank = int(np.count_nonzero(diag > rel_tol * diag[0])) if diag.size else 0
    if rank == m:
        return form
    keep = sorted(int(p) for p in piv[:rank])
    return SdpStandardForm(
        block_sizes=form.block_sizes,
        constraints=[form.constraints[k] for k in keep],
        b=form.b[keep],
        cost=form.cost,
        free_dim=form.free_dim,
        free_constraints=[form.free_constraints[k] for k in keep]
        if form.free_constraints
        else form.free_constraints,
        free_cost=form.free_cost,
    )


def compile_to_sdp(
    prog: SosProgram, block_limit: int = DEFAULT_BLOCK_LIMIT
) -> SdpProblem:
    """Coefficient-match every row identity into linear equalities over the
    Gram blocks (one PSD block per SOS slot) and the free certificate
    coefficients; the objective is the ball-moment weight vector.

    Gram bases are pruned to remove structurally forced zero diagonals
    (see _prune_bases); slots whose basis empties out are dropped.
    """
    pruned_rows: list[SosRow] = []
    for row in prog.rows:
        bases = _prune_bases(row)
        slots = tuple(
            SosSlot(label=slot.label, basis=tuple(basis), factor=slot.factor)
            for slot, basis in zip(row.slots, bases)
            if basis
        )
        pruned_rows.append(
            SosRow(
                label=row.label,
                num_vars=row.num_vars,
                slots=slots,
                c_images=row.c_images,
                rhs=row.rhs,
                region=row.region,
                x0_index=row.x0_index,
            )
        )
    prog = SosProgram(
        sys=prog.sys,
        alpha=prog.alpha,
        R=prog.R,
        d_u=prog.d_u,
        d_s=prog.d_s,
        d_sp=prog.d_sp,
        u_basis=prog.u_basis,
        rows=tuple(pruned_rows),
        objective=prog.objective,
        scale=prog.scale,
    )

    block_sizes: list[int] = []
    block_labels: list[str] = []
    slot_blocks: dict[str, int] = {}
    for row in prog.rows:
        for slot in row.slots:
            if slot.side > block_limit:
                raise ValueError(
                    f"Gram block {slot.label!r} has side {slot.side}, above "
                    f"the limit {block_limit}"
                )
            slot_blocks[slot.label] = len(block_sizes)
            block_sizes.append(slot.side)
            block_labels.append(slot.label)

    constraints: list[list[tuple[int, int, int, float]]] = []
    free_constraints: list[list[tuple[int, float]]] = []
    b_vals: list[float] = []
    for row in prog.rows:
        slot_offset = slot_blocks[row.slots[0].label] if row.slots else 0
        ents, frees, rhs = _row_support(row, [list(s.basis) for s in row.slots])
        monomials = sorted(
            set(ents) | set(frees) | set(rhs), key=lambda e: (sum(e), e)
        )
        for a in monomials:
            constraints.append(
                [
                    (slot_offset + si, p, q, v)
                    for (si, p, q), v in sorted(ents.get(a, {}).items())
                ]
            )
            free_constraints.append(sorted(frees.get(a, {}).items()))
            b_vals.append(rhs.get(a, 0.0))

    form = SdpStandardForm(
        block_sizes=tuple(block_sizes),
        constraints=constraints,
        b=np.array(b_vals),
        cost=[],
        free_dim=prog.num_coefficients,
        free_constraints=free_constraints,
        free_cost=prog.objective.copy(),
    )
    form = _drop_dependent_rows(form)
    return SdpProblem(
        form=form,
        program=prog,
        block_labels=tuple(block_labels),
        slot_blocks=dict(slot_blocks),
    )


def solve_program(
    problem: SdpProblem,
    backend: str = "auto",
    options: SdpOptions | None = None,
    scs_kwargs: dict | None = None,
) -> SdpSolution:
    """Solve the compiled SDP with the embedded interior-point solver or,
    for problems whose dense Schur complement would be too large, with the
    first-order splitting backend."""
    if backend == "auto":
        backend = (
            "embedded"
            if problem.form.m <= AUTO_EMBEDDED_MAX_CONSTRAINTS
            else "scs"
        )
    if backend == "embedded":
        return solve_sdp(problem.form, options or SdpOptions())
    if backend == "scs":
        return solve_sdp_scs(problem.form, **(scs_kwargs or {}))
    if backend == "clarabel":
        return solve_sdp_clarabel(problem.form)
    raise ValueError(f"unknown backend {backend!r}")


def _slater_probe_form(form: SdpStandardForm) -> SdpStandardForm:
    """Auxiliary SDP maximizing the common minimum eigenvalue shift lambda
    of all PSD blocks subject to the same equalities (lambda capped at 1 by
    an extra 1x1 slack block).  Its optimum is 0 exactly when residual
    faces remain, and the optimal blocks expose them as zero eigenvalues;
    it always has a strictly feasible primal point, so it solves cleanly
    even when the original problem does not."""
    lam = form.free_dim
    nb = len(form.block_sizes)
    constraints = [list(c) for c in form.constraints]
    free_constraints = [list(fc) for fc in form.free_constraints]
    for k in range(form.m):
        tr = sum(v for blk, i, j, v in form.constraints[k] if i == j)
        if tr:
            free_constraints[k] = free_constraints[k] + [(lam, tr)]
    constraints.append([(nb, 0, 0, 1.0)])
    free_constraints.append([(lam, 1.0)])
    free_cost = np.zeros(form.free_dim + 1)
    free_cost[lam] = -1.0
    return SdpStandardForm(
        block_sizes=tuple(form.block_sizes) + (1,),
        constraints=constraints,
        b=np.concatenate([form.b, [1.0]]),
        cost=[],
        free_dim=form.free_dim + 1,
        free_constraints=free_constraints,
        free_cost=free_cost,
    )


# Probe solves only steer the basis restriction, so a loose first-order
# solve is enough; its averaged iterate tracks the analytic center of the
# optimal face, which is exactly what the eigenvalue cuts need.
PROBE_SCS_SETTINGS = dict(eps_abs=1e-6, eps_rel=1e-6, max_iters=20_000)
SLATER_CERTIFIED = 1e-5
FINAL_SCS_SETTINGS = dict(eps_abs=1e-7, eps_rel=1e-7, max_iters=200_000)
# Beyond this many equality rows the Slater probes cost as much as the
# final solve and their averaged iterates no longer resolve the face
# structure, so the auto path solves the compiled problem directly, at
# the tolerance the first-order backend can actually reach at that size.
REDUCTION_MAX_ROWS = 4000
LARGE_SCS_SETTINGS = dict(eps_abs=5e-6, eps_rel=5e-6, max_iters=60_000)
# Clarabel's PSD-cone KKT blocks are dense in the triangle dimension, so
# its memory grows with the fourth power of the largest block side; above
# this side the auto path skips straight to the first-order backend.
CLARABEL_MAX_BLOCK = 150


def _solve_probe(form: SdpStandardForm) -> tuple[SdpSolution, bool]:
    """Solve a Slater probe; returns (solution, averaged_iterate_flag)."""
    try:
        return solve_sdp_scs(form, **PROBE_SCS_SETTINGS), True
    except ImportError:
        return solve_sdp(form, SdpOptions()), False


def solve_with_reduction(
    problem: SdpProblem,
    backend: str = "auto",
    options: SdpOptions | None = None,
    scs_kwargs: dict | None = None,
    max_rounds: int = 4,
    cut_tol: float = 1e-7,
) -> tuple[SdpSolution, SdpProblem]:
    """Locate residual cone faces with a Slater probe, restrict the Gram
    bases along them and recompile until the probe certifies a strictly
    feasible interior, then solve the reduced problem.

    The probe maximizes a common eigenvalue shift of all blocks (see
    _slater_probe_form); block eigenvectors stuck at zero at its optimum
    are directions no feasible point can leave, plus possibly a few that
    restore dual attainment when cut.  Either way the restriction only
    shrinks the primal feasible set, so certificates recovered from the
    returned problem remain sound.  Returns the solution together with
    the problem instance it belongs to.
    """
    large = problem.form.m > REDUCTION_MAX_ROWS
    for _ in range(0 if large else max_rounds):
        probe, averaged = _solve_probe(_slater_probe_form(problem.form))
        lam = float(probe.free_values[-1])
        if (averaged or probe.status == "optimal") and lam > SLATER_CERTIFIED:
            break  # strictly feasible interior found; nothing left to cut
        if not averaged and probe.status != "optimal":
            break  # interior-point probe diverged; its blocks are untrustworthy
        # The probe's zero eigenvalues land at its accuracy floor, which the
        # residual |lambda| measures; widen the cut threshold accordingly.
        thresh = max(cut_tol, 10.0 * abs(lam))
        faces: dict[str, np.ndarray] = {}
        # zip drops the probe's trailing eigenvalue-cap block automatically.
        for label, X in zip(problem.block_labels, probe.X):
            if X.shape[0] == 0:
                continue
            w, V = np.linalg.eigh(0.5 * (X + X.T))
            sel = w < thresh
            if np.any(sel) and not np.all(sel):
                faces[label] = V[:, sel].T
        if not faces:
            break
        prog = problem.program
        new_rows = []
        for row in prog.rows:
            new_slots = []
            for slot in row.slots:
                K = faces.get(slot.label)
                if K is not None:
                    new_slots.append(
                        dataclasses.replace(
                            slot, basis=_restrict_basis(slot.basis, K)
                        )
                    )
                else:
                    new_slots.append(slot)
            new_rows.append(dataclasses.replace(row, slots=tuple(new_slots)))
        problem = compile_to_sdp(dataclasses.replace(prog, rows=tuple(new_rows)))
    if backend == "auto":
        # Even with a certified interior these compiled programs routinely
        # lack dual attainment, which stalls the dense interior-point
        # method.  Clarabel handles them best (with a raised static KKT
        # regularization as a second attempt on the worst-conditioned
        # instances); the first-order backend is the fallback, at a
        # tolerance still well inside the sampling audit's margin.
        sol = None
        if max(problem.form.block_sizes, default=0) <= CLARABEL_MAX_BLOCK:
            try:
                sol = solve_sdp_clarabel(problem.form)
                if sol.status != "optimal":
                    sol = solve_sdp_clarabel(problem.form, static_reg=1e-7)
            except ImportError:
                pass
        if sol is None or sol.status != "optimal":
            try:
                kwargs = dict(LARGE_SCS_SETTINGS if large else FINAL_SCS_SETTINGS)
                kwargs.update(scs_kwargs or {})
                sol = solve_sdp_scs(problem.form, **kwargs)
            except ImportError:
                sol = solve_sdp(problem.form, options or SdpOptions())
    else:
        sol = solve_program(problem, backend, options, scs_kwargs)
    return sol, problem


def gram_polynomial(basis: Sequence[Polynomial], G: np.ndarray) -> Polynomial:
    """Expand the quadratic form z(x)' G z(x) over the polynomial basis."""
    nv = basis[0].num_vars
    terms: dict[Exponents, float] = {}
    for p in range(len(basis)):
        for q in range(len(basis)):
            g = float(G[p, q])
            if g == 0.0:
                continue
            for e1, c1 in basis[p].terms.items():
                for e2, c2 in basis[q].terms.items():
                    a = tuple(x + y for x, y in zip(e1, e2))
                    terms[a] = terms.get(a, 0.0) + g * c1 * c2
    return Polynomial(nv, terms)


@dataclass(frozen=True)
class VerificationReport:
    """Sampled audit of the certificate conditions; never raised, only read."""

    samples: int
    seed: int
    dynamic_margin: float       # worst of u(x) - alpha*u(f_i(x,d)) on B x D
    state_margin: float         # worst of (1 + h0j^2) u - h0j on B
    containment_failures: int   # sampled u <= 0 points outside X0
    closure_margin: float       # worst u(one-step image) over the sampled set
    set_samples: int            # sampled points with u <= 0
    min_u: float
    unmatched_states: int       # samples in no region (excluded from dynamics)
    margin_tol: float = VERIFY_MARGIN_TOL

    @property
    def set_empty(self) -> bool:
        return self.set_samples == 0

    @property
    def passed(self) -> bool:
        return (
            self.dynamic_margin >= -self.margin_tol
            and self.state_margin >= -self.margin_tol
            and self.containment_failures == 0
            and self.closure_margin <= self.margin_tol
        )


@dataclass(frozen=True)
class Certificate:
    """A synthesized invariance certificate: {x in B | u(x) <= 0}."""

    u: Polynomial
    multipliers: dict[str, Polynomial]  # slot label -> expanded SOS polynomial
    alpha: float
    R: float
    report: Optional[VerificationReport] = None


def recover_certificate(problem: SdpProblem, solution: SdpSolution) -> Certificate:
    """Read the certificate polynomial and multipliers out of a solve."""
    if solution.status != "optimal":
        raise ValueError(
            f"cannot recover certificate from a solve with status "
            f"{solution.status!r}: {solution.message or 'not converged'}"
        )
    prog = problem.program
    n = prog.sys.state_dim
    r = prog.scale
    # Undo the ball normalization: a coefficient of y^b becomes a
    # coefficient of x^b / r^|b|; multiplier polynomials are composed with
    # y = x / r, and ball-slot multipliers absorb the factor relating the
    # unit-ball polynomial to the original one, 1 - |x/r|^2 = (R - |x|^2)/R.
    u = Polynomial(
        n,
        {b: c * r ** -sum(b) for b, c in zip(prog.u_basis, solution.free_values)},
    )
    multipliers: dict[str, Polynomial] = {}
    for row in prog.rows:
        for slot in row.slots:
            G = solution.X[problem.slot_blocks[slot.label]]
            m = _state_rescale(gram_polynomial(slot.basis, G), 1.0 / r, n)
            if slot.label.endswith(".ball"):
                m = m * (1.0 / prog.R)
            multipliers[slot.label] = m
    return Certificate(u=u, multipliers=multipliers, alpha=prog.alpha, R=prog.R)


def row_residual(problem: SdpProblem, cert: Certificate, row: SosRow) -> Polynomial:
    """Defect of the row identity at the recovered certificate; should be
    numerically zero when the solve converged."""
    prog = problem.program
    n = prog.sys.state_dim
    r = prog.scale
    acc = -row.rhs
    # The rows live in ball-normalized coordinates while the certificate
    # is in the original ones; map the certificate pieces forward again.
    for slot in row.slots:
        m = _state_rescale(cert.multipliers[slot.label], r, n)
        if slot.label.endswith(".ball"):
            m = m * prog.R
        acc = acc + m * slot.factor
    coeffs = [cert.u.terms.get(b, 0.0) * r ** sum(b) for b in prog.u_basis]
    for c, image in zip(coeffs, row.c_images):
        if c:
            acc = acc - c * image
    return acc


def _sample_ball(rng: np.random.Generator, n: int, R: float, count: int) -> np.ndarray:
    g = rng.standard_normal((count, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    radii = math.sqrt(R) * rng.random(count) ** (1.0 / n)
    return g * radii[:, None]


def _sample_perts(sys: SwitchedSystem, rng: np.random.Generator, count: int) -> np.ndarray:
    lo, hi = sys.pert_box[:, 0], sys.pert_box[:, 1]
    out = np.empty((count, sys.pert_dim))
    have = 0
    while have < count:
        cand = rng.uniform(lo, hi, size=(max(count, 64), sys.pert_dim))
        keep = np.ones(cand.shape[0], dtype=bool)
        for h in sys.pert_constraints:
            keep &= h.eval_many(cand) <= 0.0
        cand = cand[keep]
        take = min(count - have, cand.shape[0])
        out[have : have + take] = cand[:take]
        have += take
        if take == 0 and not np.any(keep):
            raise ValueError("rejection sampling found no admissible perturbation")
    return out


def verify_certificate(
    sys: SwitchedSystem,
    cert: Certificate,
    samples: int = 10_000,
    seed: int = 0,
    pgrid: PerturbationGrid | None = None,
    margin_tol: float = VERIFY_MARGIN_TOL,
) -> VerificationReport:
    """Sample-based audit of the certificate conditions.

    (a) the dynamic and state inequalities hold with margin >= -margin_tol
    at uniform samples of the ball (perturbations uniform in D),
    (b) every sampled point with u <= 0 lies in X0,
    (c) one-step images of the sampled set satisfy u <= margin_tol under
    every perturbation of pgrid (10 points per axis by default).

    The default margin_tol suits certificates from interior-point solves;
    large problems finished by the first-order backend carry identity
    defects around its tolerance, so pass margin_tol accordingly.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    n = sys.state_dim
    pts = _sample_ball(rng, n, cert.R, samples)
    perts = _sample_perts(sys, rng, samples)
    if pgrid is None:
        pgrid = PerturbationGrid.uniform(sys, 10)

    u_vals = cert.u.eval_many(pts)
    min_u = float(np.min(u_vals))

    # (a) dynamic rows, each sample dispatched to its region.
    regions = region_of_many(sys, pts)
    unmatched = int(np.count_nonzero(regions == 0))
    dynamic_margin = math.inf
    xd = np.hstack([pts, perts])
    for i, maps in enumerate(sys.dynamics, start=1):
        sel = regions == i
        if not np.any(sel):
            continue
        images = np.stack([f.eval_many(xd[sel]) for f in maps], axis=1)
        margin = u_vals[sel] - cert.alpha * cert.u.eval_many(images)
        dynamic_margin = min(dynamic_margin, float(np.min(margin)))

    # (a) state rows.
    state_margin = math.inf
    for h0 in sys.x0_constraints:
        h_vals = h0.eval_many(pts)
        margin = (1.0 + h_vals**2) * u_vals - h_vals
        state_margin = min(state_margin, float(np.min(margin)))

    # (b) containment and (c) one-step closure of the sampled set.
    inset = u_vals <= 0.0
    set_pts = pts[inset]
    containment_failures = int(
        np.count_nonzero(~sys.in_state_set_many(set_pts))
    ) if set_pts.shape[0] else 0
    closure_margin = -math.inf
    if set_pts.shape[0]:
        matched = region_of_many(sys, set_pts) > 0
        set_pts = set_pts[matched]
        for d in pgrid.points:
            if set_pts.shape[0] == 0:
                break
            images = step_many(sys, set_pts, d)
            closure_margin = max(
                closure_margin, float(np.max(cert.u.eval_many(images)))
            )
    return VerificationReport(
        samples=samples,
        seed=seed,
        dynamic_margin=dynamic_margin if math.isfinite(dynamic_margin) else 0.0,
        state_margin=state_margin,
        containment_failures=containment_failures,
        closure_margin=closure_margin if math.isfinite(closure_margin) else 0.0,
        set_samples=int(np.count_nonzero(inset)),
        min_u=min_u,
        unmatched_states=unmatched,
        margin_tol=margin_tol,
    )


def certificate_to_json(cert: Certificate) -> str:
    doc = {
        "alpha": cert.alpha,
        "R": cert.R,
        "state_dim": cert.u.num_vars,
        "u": cert.u.to_json(),
        "multipliers": {
            label: {"num_vars": p.num_vars, "terms": p.to_json()}
            for label, p in sorted(cert.multipliers.items())
        },
    }
    if cert.report is not None:
        r = cert.report
        doc["report"] = {
            "samples": r.samples,
            "seed": r.seed,
            "dynamic_margin": r.dynamic_margin,
            "state_margin": r.state_margin,
            "containment_failures": r.containment_failures,
            "closure_margin": r.closure_margin,
            "set_samples": r.set_samples,
            "min_u": r.min_u,
            "unmatched_states": r.unmatched_states,
            "margin_tol": r.margin_tol,
            "passed": r.passed,
        }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def certificate_from_json(text: str) -> Certificate:
    doc = json.loads(text)
    u = Polynomial.from_json(int(doc["state_dim"]), doc["u"])
    multipliers = {
        label: Polynomial.from_json(int(entry["num_vars"]), entry["terms"])
        for label, entry in doc.get("multipliers", {}).items()
    }
    report = None
    if "report" in doc:
        r = doc["report"]
        report = VerificationReport(
            samples=int(r["samples"]),
            seed=int(r["seed"]),
            dynamic_margin=float(r["dynamic_margin"]),
            state_margin=float(r["state_margin"]),
            containment_failures=int(r["containment_failures"]),
            closure_margin=float(r["closure_margin"]),
            set_samples=int(r["set_samples"]),
            min_u=float(r["min_u"]),
            unmatched_states=int(r["unmatched_states"]),
            margin_tol=float(r.get("margin_tol", VERIFY_MARGIN_TOL)),
        )
    return Certificate(
        u=u,
        multipliers=multipliers,
        alpha=float(doc["alpha"]),
        R=float(doc["R"]),
        report=report,
    )
