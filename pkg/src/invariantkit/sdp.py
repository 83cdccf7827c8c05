"""Standard-form semidefinite programming.

Primal:  min <C, X> + g.f   s.t.  <A_i, X> + (B f)_i = b_i,  X >= 0 (PSD),
with X block diagonal and f a vector of free scalar variables.  The
embedded solver is a dense primal-dual path-following method (HKM
direction, fraction-to-the-boundary steps, optional Mehrotra corrector)
meant for desk-scale problems; anything larger goes out via the SDPA
sparse format (see sdpa.py) or the SCS backend (see sos.py).

Matrix entries are stored upper-triangular: an entry (blk, i, j, v) with
i < j contributes 2*v*X_ij to the trace inner product, and v*X_ii when
i == j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

Entry = tuple[int, int, int, float]  # (block, i, j, value), 0-based, i <= j


@dataclass
class SdpStandardForm:
    """Block-diagonal standard-form SDP, optionally with free scalars.

    ``block_sizes`` uses the SDPA convention: a negative size marks a
    diagonal block (entries restricted to the diagonal).
    """

    block_sizes: tuple[int, ...]
    constraints: list[list[Entry]]
    b: np.ndarray
    cost: list[Entry]
    free_dim: int = 0
    free_constraints: Optional[list[list[tuple[int, float]]]] = None
    free_cost: Optional[np.ndarray] = None

    def __post_init__(self):
        self.block_sizes = tuple(int(s) for s in self.block_sizes)
        if any(s == 0 for s in self.block_sizes):
            raise ValueError("zero-size block")
        self.b = np.asarray(self.b, dtype=float)
        if len(self.constraints) != self.b.shape[0]:
            raise ValueError("constraint count does not match b")
        for ent_list in list(self.constraints) + [self.cost]:
            for blk, i, j, _ in ent_list:
                size = abs(self.block_sizes[blk])
                if not (0 <= i <= j < size):
                    raise ValueError(f"entry ({blk},{i},{j}) outside block or not upper")
                if self.block_sizes[blk] < 0 and i != j:
                    raise ValueError("off-diagonal entry in a diagonal block")
        if self.free_dim:
            if self.free_constraints is None:
                self.free_constraints = [[] for _ in range(self.m)]
            if self.free_cost is None:
                self.free_cost = np.zeros(self.free_dim)
            self.free_cost = np.asarray(self.free_cost, dtype=float)

    @property
    def m(self) -> int:
        return self.b.shape[0]

    @property
    def total_side(self) -> int:
        return sum(abs(s) for s in self.block_sizes)

    # -- compiled sparse views (built on demand) ----------------------------

    def compiled(self) -> "_Compiled":
        return _Compiled(self)

    def split_free(self) -> "SdpStandardForm":
        """Encode free scalars as the difference of a doubled diagonal block.

        Used for SDPA export; the embedded solver handles free variables
        natively.
        """
        if not self.free_dim:
            return self
        q = self.free_dim
        nb = len(self.block_sizes)
        constraints = []
        for ents, fents in zip(self.constraints, self.free_constraints):
            extra = []
            for col, val in fents:
                extra.append((nb, col, col, val))
                extra.append((nb, q + col, q + col, -val))
            constraints.append(list(ents) + extra)
        cost = list(self.cost)
        for col, val in enumerate(self.free_cost):
            if val != 0.0:
                cost.append((nb, col, col, val))
                cost.append((nb, q + col, q + col, -val))
        return SdpStandardForm(
            block_sizes=self.block_sizes + (-2 * q,),
            constraints=constraints,
            b=self.b.copy(),
            cost=cost,
        )


class _Compiled:
    """Per-block CSR operators for fast A(X), A^T(y) and Schur assembly."""

    def __init__(self, prob: SdpStandardForm):
        self.prob = prob
        self.sizes = [abs(s) for s in prob.block_sizes]
        m = prob.m
        self.T: list[sp.csr_matrix] = []     # (m, nb^2), full symmetric entries
        self.P: list[sp.csr_matrix] = []     # (m*nb, nb), stacked A_i rows
        self.C: list[np.ndarray] = []
        for nb in self.sizes:
            self.C.append(np.zeros((nb, nb)))
        for blk, i, j, v in prob.cost:
            self.C[blk][i, j] += v
            if i != j:
                self.C[blk][j, i] += v
        rows = [[] for _ in self.sizes]
        cols = [[] for _ in self.sizes]
        vals = [[] for _ in self.sizes]
        prows = [[] for _ in self.sizes]
        pcols = [[] for _ in self.sizes]
        pvals = [[] for _ in self.sizes]
        for ci, ents in enumerate(prob.constraints):
            for blk, i, j, v in ents:
                nb = self.sizes[blk]
                rows[blk].append(ci)
                cols[blk].append(i * nb + j)
                vals[blk].append(v)
                prows[blk].append(ci * nb + i)
                pcols[blk].append(j)
                pvals[blk].append(v)
                if i != j:
                    rows[blk].append(ci)
                    cols[blk].append(j * nb + i)
                    vals[blk].append(v)
                    prows[blk].append(ci * nb + j)
                    pcols[blk].append(i)
                    pvals[blk].append(v)
        for bi, nb in enumerate(self.sizes):
            self.T.append(
                sp.csr_matrix(
                    (vals[bi], (rows[bi], cols[bi])), shape=(m, nb * nb)
                )
            )
            self.P.append(
                sp.csr_matrix(
                    (pvals[bi], (prows[bi], pcols[bi])), shape=(m * nb, nb)
                )
            )
        if prob.free_dim:
            fr, fc, fv = [], [], []
            for ci, fents in enumerate(prob.free_constraints):
                for col, v in fents:
                    fr.append(ci)
                    fc.append(col)
                    fv.append(v)
            self.B = sp.csr_matrix((fv, (fr, fc)), shape=(m, prob.free_dim))
            self.g = prob.free_cost
        else:
            self.B = None
            self.g = np.zeros(0)

    def apply_A(self, mats: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.prob.m)
        for T, M in zip(self.T, mats):
            out += T @ M.ravel()
        return out

    def apply_AT(self, y: np.ndarray) -> list[np.ndarray]:
        mats = []
        for T, nb in zip(self.T, self.sizes):
            mats.append((T.T @ y).reshape(nb, nb))
        return mats


@dataclass
class SdpOptions:
    gap_tol: float = 1e-8
    feas_tol: float = 1e-8
    max_iters: int = 200
    mehrotra: bool = True
    dense_limit: int = 2000
    step_factor: float = 0.98
    schur_chunk: int = 256


@dataclass
class SdpSolution:
    X: list[np.ndarray]
    y: np.ndarray
    S: list[np.ndarray]
    free_values: np.ndarray
    status: str                 # optimal | infeasible | unbounded | iteration-limit
    primal_objective: float
    dual_objective: float
    gap: float
    iterations: int
    message: str = ""


class SdpSizeError(ValueError):
    pass


def check_psd(matrix: np.ndarray, tol: float) -> tuple[bool, float]:
    """(min eigenvalue >= -tol, min eigenvalue) for a symmetric matrix."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("expected a square matrix")
    asym = float(np.max(np.abs(matrix - matrix.T))) if matrix.size else 0.0
    if asym > 1e-12:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    if matrix.size == 0:
        return True, 0.0
    min_eig = float(np.linalg.eigvalsh(matrix)[0])
    return min_eig >= -tol, min_eig


def _max_step(M: np.ndarray, dM: np.ndarray) -> float:
    """Largest a with M + a*dM still PSD (M assumed PD), via Cholesky scaling."""
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return 0.0
    W = np.linalg.solve(L, np.linalg.solve(L, dM).T)
    lam = float(np.linalg.eigvalsh(0.5 * (W + W.T))[0])
    if lam >= -1e-16:
        return np.inf
    return -1.0 / lam


def solve_sdp(problem: SdpStandardForm, options: SdpOptions | None = None) -> SdpSolution:
    """Primal-dual path-following interior-point solve.

    Returns status 'optimal' only when primal/dual feasibility and the
    relative duality gap are all within the configured tolerances.
    """
    opt = options or SdpOptions()
    if problem.total_side > opt.dense_limit:
        raise SdpSizeError(
            f"total matrix side {problem.total_side} exceeds the dense limit "
            f"{opt.dense_limit}; export via SDPA or use the scs backend"
        )
    return _Ipm(problem, opt).run()


class _Ipm:
    def __init__(self, problem: SdpStandardForm, opt: SdpOptions):
        self.opt = opt
        self.orig = problem
        self.com = problem.compiled()
        self.m = problem.m
        self.sizes = self.com.sizes
        self.nblocks = len(self.sizes)
        self.ntot = sum(self.sizes)
        self.q = problem.free_dim

        # Row scaling: unit Frobenius norm per constraint.
        norms = np.zeros(self.m)
        for T in self.com.T:
            norms += np.asarray(T.multiply(T).sum(axis=1)).ravel()
        if self.q:
            norms += np.asarray(self.com.B.multiply(self.com.B).sum(axis=1)).ravel()
        self.row_scale = np.sqrt(np.maximum(norms, 1e-30))
        self.row_scale = np.maximum(self.row_scale, 1e-8)
        D = sp.diags(1.0 / self.row_scale)
        self.T = [D @ T for T in self.com.T]
        self.P = [
            _scale_stacked(P, self.row_scale, nb)
            for P, nb in zip(self.com.P, self.sizes)
        ]
        self.B = D @ self.com.B if self.q else None
        self.b = problem.b / self.row_scale

        self.obj_scale = max(
            1.0,
            max((float(np.abs(C).max(initial=0.0)) for C in self.com.C), default=0.0),
            float(np.abs(self.com.g).max(initial=0.0)) if self.q else 0.0,
        )
        self.C = [C / self.obj_scale for C in self.com.C]
        self.g = self.com.g / self.obj_scale if self.q else np.zeros(0)

    # -- linear operators on the scaled data --------------------------------

    def apply_A(self, mats):
        out = np.zeros(self.m)
        for T, M in zip(self.T, mats):
            out += T @ M.ravel()
        return out

    def apply_AT(self, y):
        return [(T.T @ y).reshape(nb, nb) for T, nb in zip(self.T, self.sizes)]

    def schur(self, X, Sinv):
        """M_ij = sum_b tr(A_i X A_j S^{-1}), assembled block by block."""
        M = np.zeros((self.m, self.m))
        chunk = self.opt.schur_chunk
        for bi, nb in enumerate(self.sizes):
            T, P = self.T[bi], self.P[bi]
            Xb, Sb = X[bi], Sinv[bi]
            # Process constraints in chunks of rows of the stacked operator.
            for start in range(0, self.m, chunk):
                stop = min(start + chunk, self.m)
                Psub = P[start * nb : stop * nb]
                if Psub.nnz == 0:
                    continue
                U = Psub @ Sb                              # stacked A_j S^{-1}
                r = stop - start
                U = U.reshape(r, nb, nb).transpose(1, 0, 2).reshape(nb, r * nb)
                W = Xb @ U                                 # stacked X A_j S^{-1}
                W = W.reshape(nb, r, nb).transpose(1, 0, 2).reshape(r, nb * nb)
                M[:, start:stop] += T @ W.T
        return 0.5 * (M + M.T)

    # -- main loop -----------------------------------------------------------

    def run(self) -> SdpSolution:
        opt = self.opt
        scale0 = max(1.0, float(np.abs(self.b).max(initial=0.0)))
        X = [np.eye(nb) * 10.0 * scale0 for nb in self.sizes]
        S = [np.eye(nb) * max(10.0, 10.0 * _c_norm(self.C)) for nb in self.sizes]
        y = np.zeros(self.m)
        f = np.zeros(self.q)

        status = "iteration-limit"
        message = ""
        iters = 0
        for iters in range(1, opt.max_iters + 1):
            rp = self.b - self.apply_A(X)
            if self.q:
                rp -= self.B @ f
            ATy = self.apply_AT(y)
            Rd = [C - Sb - A for C, Sb, A in zip(self.C, S, ATy)]
            rg = self.g - (self.B.T @ y) if self.q else np.zeros(0)

            pobj = sum(np.vdot(C, Xb) for C, Xb in zip(self.C, X)) + (
                self.g @ f if self.q else 0.0
            )
            dobj = self.b @ y
            gap_abs = abs(pobj - dobj)
            relgap = gap_abs / (1.0 + abs(pobj) + abs(dobj))
            pinf = np.linalg.norm(rp) / (1.0 + np.linalg.norm(self.b))
            dinf = np.sqrt(
                sum(float(np.sum(R * R)) for R in Rd) + float(rg @ rg)
            ) / (1.0 + _c_norm(self.C))

            if pinf <= opt.feas_tol and dinf <= opt.feas_tol and relgap <= opt.gap_tol:
                status = "optimal"
                break
            if abs(dobj) > 1e12 and pinf > 1e-6:
                status = "infeasible"
                message = "dual objective diverging with primal residual stuck"
                break
            if pobj < -1e12 and dinf > 1e-6:
                status = "unbounded"
                message = "primal objective diverging with dual residual stuck"
                break

            mu = sum(np.vdot(Xb, Sb) for Xb, Sb in zip(X, S)) / max(self.ntot, 1)
            try:
                Sinv = [_inv_psd(Sb) for Sb in S]
                M = self.schur(X, Sinv)
                Mfac = self._factor_kkt(M)
            except np.linalg.LinAlgError as exc:
                message = f"numerical breakdown in Schur factorization: {exc}"
                break

            XRdSinv = [Xb @ R @ Si for Xb, R, Si in zip(X, Rd, Sinv)]

            def direction(sigma, Kcorr=None):
                Hmat = []
                for bi in range(self.nblocks):
                    Hb = sigma * mu * Sinv[bi] - X[bi]
                    if Kcorr is not None:
                        Hb = Hb - Kcorr[bi] @ Sinv[bi]
                    Hmat.append(Hb)
                r1 = rp - self.apply_A(Hmat) + self.apply_A(XRdSinv)
                dy, df = self._solve_kkt(Mfac, r1, rg)
                dS = [R - A for R, A in zip(Rd, self.apply_AT(dy))]
                dX = []
                for bi in range(self.nblocks):
                    D = Hmat[bi] - X[bi] @ dS[bi] @ Sinv[bi]
                    dX.append(0.5 * (D + D.T))
                return dX, dy, dS, df

            if opt.mehrotra:
                dXa, dya, dSa, dfa = direction(0.0)
                ap = _min_step(X, dXa, opt.step_factor)
                ad = _min_step(S, dSa, opt.step_factor)
                gap_aff = sum(
                    np.vdot(X[bi] + ap * dXa[bi], S[bi] + ad * dSa[bi])
                    for bi in range(self.nblocks)
                )
                gap_now = mu * self.ntot
                sigma = min(1.0, max(0.0, gap_aff / max(gap_now, 1e-300))) ** 3
                Kcorr = [dXa[bi] @ dSa[bi] for bi in range(self.nblocks)]
                dX, dy, dS, df = direction(sigma, Kcorr)
            else:
                dX, dy, dS, df = direction(0.3)

            ap = _min_step(X, dX, opt.step_factor)
            ad = _min_step(S, dS, opt.step_factor)
            if ap < 1e-10 and ad < 1e-10:
                message = "step length collapsed"
                break
            for bi in range(self.nblocks):
                X[bi] = X[bi] + ap * dX[bi]
                S[bi] = S[bi] + ad * dS[bi]
            y = y + ad * dy
            if self.q:
                f = f + ap * df

        # Undo scaling.
        y_out = y / self.row_scale * self.obj_scale
        S_out = [Sb * self.obj_scale for Sb in S]
        pobj_out = (
            sum(np.vdot(C, Xb) for C, Xb in zip(self.C, X))
            + (self.g @ f if self.q else 0.0)
        ) * self.obj_scale
        dobj_out = (self.b @ y) * self.obj_scale
        return SdpSolution(
            X=X,
            y=y_out,
            S=S_out,
            free_values=f,
            status=status,
            primal_objective=float(pobj_out),
            dual_objective=float(dobj_out),
            gap=float(abs(pobj_out - dobj_out)),
            iterations=iters,
            message=message,
        )

    def _factor_kkt(self, M):
        """Factor the (possibly bordered) Newton normal system.

        Without free variables this is a Cholesky of the Schur complement.
        With free variables the bordered saddle system is factored whole by
        LU with a tiny quasi-definite regularization: eliminating the free
        block through an ill-conditioned M squares its condition number,
        which is exactly what breaks down on degenerate SOS instances.
        """
        import scipy.linalg as sla

        if not self.q:
            return ("chol", _factor(M), None)
        reg = 1e-13 * (1.0 + float(np.trace(M)) / max(self.m, 1))
        Bd = np.asarray(self.B.todense())
        K = np.zeros((self.m + self.q, self.m + self.q))
        K[: self.m, : self.m] = M + reg * np.eye(self.m)
        K[: self.m, self.m :] = Bd
        K[self.m :, : self.m] = Bd.T
        K[self.m :, self.m :] = -reg * np.eye(self.q)
        K0 = np.zeros_like(K)
        K0[: self.m, : self.m] = M
        K0[: self.m, self.m :] = Bd
        K0[self.m :, : self.m] = Bd.T
        return ("lu", sla.lu_factor(K, check_finite=False), K0)

    def _solve_kkt(self, Mfac, r1, rg):
        kind, fac, K0 = Mfac
        if kind == "chol":
            return _solve_with(fac, r1), np.zeros(0)
        import scipy.linalg as sla

        rhs = np.concatenate([r1, rg])
        sol = sla.lu_solve(fac, rhs, check_finite=False)
        # One step of iterative refinement against the unregularized system.
        resid = rhs - K0 @ sol
        sol += sla.lu_solve(fac, resid, check_finite=False)
        return sol[: self.m], sol[self.m :]


def solve_sdp_scs(
    problem: SdpStandardForm,
    eps_abs: float = 1e-8,
    eps_rel: float = 1e-8,
    max_iters: int = 200_000,
    verbose: bool = False,
    **scs_settings,
) -> SdpSolution:
    """Solve the standard form with the SCS first-order conic solver.

    Used for problems whose dense Schur complement does not fit in memory;
    the decision variables are the scaled lower-triangular vectorizations
    of the PSD blocks plus the free scalars.
    """
    try:
        import scs
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise ImportError(
            "the scs backend requires the 'scs' package "
            "(pip install invariantkit[scs])"
        ) from exc

    sizes = list(problem.block_sizes)
    psd = [s for s in sizes if s > 0]
    diag = [-s for s in sizes if s < 0]
    if diag and psd and sizes != sorted(sizes, key=lambda s: s > 0):
        # SCS slack layout is (zero, nonneg, psd); reorder not implemented.
        raise NotImplementedError("diagonal blocks must precede PSD blocks")

    rt2 = np.sqrt(2.0)
    nvar_block: list[int] = []
    offsets: list[int] = []
    off = 0
    for s in sizes:
        offsets.append(off)
        nv = -s if s < 0 else s * (s + 1) // 2
        nvar_block.append(nv)
        off += nv
    n_gram = off
    q = problem.free_dim
    N = n_gram + q
    m = problem.m

    def var_index(blk: int, i: int, j: int) -> tuple[int, float]:
        # (index into x, inner-product scaling for an upper-tri entry value)
        s = sizes[blk]
        if s < 0:
            return offsets[blk] + i, 1.0
        lo, hi = min(i, j), max(i, j)
        pos = lo * s - lo * (lo - 1) // 2 + (hi - lo)
        return offsets[blk] + pos, 1.0 if i == j else rt2

    c = np.zeros(N)
    for blk, i, j, v in problem.cost:
        idx, scale = var_index(blk, i, j)
        c[idx] += scale * v
    if q:
        c[n_gram:] = problem.free_cost

    rows, cols, vals = [], [], []
    for ci, ents in enumerate(problem.constraints):
        for blk, i, j, v in ents:
            idx, scale = var_index(blk, i, j)
            rows.append(ci)
            cols.append(idx)
            vals.append(scale * v)
    if q:
        for ci, fents in enumerate(problem.free_constraints):
            for col, v in fents:
                rows.append(ci)
                cols.append(n_gram + col)
                vals.append(v)
    # Cone rows: s_cone = x_gram, i.e. -I x + s = 0 for every gram variable.
    for k in range(n_gram):
        rows.append(m + k)
        cols.append(k)
        vals.append(-1.0)
    A = sp.csc_matrix((vals, (rows, cols)), shape=(m + n_gram, N))
    b_full = np.concatenate([problem.b, np.zeros(n_gram)])
    cone = {"z": m}
    if diag:
        cone["l"] = sum(diag)
    if psd:
        cone["s"] = psd

    result = scs.solve(
        dict(A=A, b=b_full, c=c),
        cone,
        eps_abs=eps_abs,
        eps_rel=eps_rel,
        max_iters=max_iters,
        verbose=verbose,
        **scs_settings,
    )
    info = result["info"]
    raw = info["status"].lower()
    if raw == "solved":
        status = "optimal"
    elif "infeasible" in raw:
        status = "infeasible"
    elif "unbounded" in raw:
        status = "unbounded"
    else:
        status = "iteration-limit"

    def unpack(vec: np.ndarray) -> list[np.ndarray]:
        mats = []
        for blk, s in enumerate(sizes):
            seg = vec[offsets[blk] : offsets[blk] + nvar_block[blk]]
            if s < 0:
                mats.append(np.diag(seg))
                continue
            M = np.zeros((s, s))
            pos = 0
            for jj in range(s):
                for ii in range(jj, s):
                    val = seg[pos]
                    if ii != jj:
                        val /= rt2
                    M[ii, jj] = val
                    M[jj, ii] = val
                    pos += 1
            mats.append(M)
        return mats

    x = result["x"]
    y_scs = result["y"]
    X = unpack(x[:n_gram])
    S = unpack(y_scs[m:])
    pobj = float(info["pobj"])
    dobj = float(info["dobj"])
    return SdpSolution(
        X=X,
        y=-y_scs[:m],
        S=S,
        free_values=x[n_gram:].copy(),
        status=status,
        primal_objective=pobj,
        dual_objective=dobj,
        gap=abs(pobj - dobj),
        iterations=int(info["iter"]),
        message=info["status"],
    )


def solve_sdp_clarabel(
    problem: SdpStandardForm,
    max_iters: int = 200,
    static_reg: float | None = None,
    verbose: bool = False,
) -> SdpSolution:
    """Solve the standard form with the Clarabel interior-point solver.

    Equality rows are normalized to unit norm first; on badly conditioned
    certificate compilations Clarabel needs a larger static KKT
    regularization than its default to get through the first factorization,
    so callers may pass ``static_reg`` explicitly.
    """
    try:
        import clarabel
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise ImportError(
            "the clarabel backend requires the 'clarabel' package "
            "(pip install invariantkit[clarabel])"
        ) from exc

    sizes = list(problem.block_sizes)
    rt2 = np.sqrt(2.0)
    offsets: list[int] = []
    off = 0
    for s in sizes:
        offsets.append(off)
        off += -s if s < 0 else s * (s + 1) // 2
    n_gram = off
    q = problem.free_dim
    N = n_gram + q
    m = problem.m

    def var_index(blk: int, i: int, j: int) -> tuple[int, float]:
        s = sizes[blk]
        if s < 0:
            return offsets[blk] + i, 1.0
        lo, hi = min(i, j), max(i, j)
        # svec layout: upper triangle, column major, off-diagonals * sqrt(2)
        return offsets[blk] + hi * (hi + 1) // 2 + lo, 1.0 if i == j else rt2

    rows, cols, vals = [], [], []
    for ci, ents in enumerate(problem.constraints):
        for blk, i, j, v in ents:
            idx, scale = var_index(blk, i, j)
            rows.append(ci)
            cols.append(idx)
            vals.append(scale * v)
    if q:
        for ci, fents in enumerate(problem.free_constraints):
            for col, v in fents:
                rows.append(ci)
                cols.append(n_gram + col)
                vals.append(v)
    A_eq = sp.csr_matrix((vals, (rows, cols)), shape=(m, N))
    row_norm = np.sqrt(np.asarray(A_eq.multiply(A_eq).sum(axis=1)).ravel())
    row_norm = np.maximum(row_norm, 1e-12)
    A_eq = sp.diags(1.0 / row_norm) @ A_eq
    b_eq = problem.b / row_norm
    ident = sp.hstack(
        [-sp.identity(n_gram, format="csc"), sp.csc_matrix((n_gram, q))]
    )
    A = sp.vstack([A_eq, ident]).tocsc()
    b_full = np.concatenate([b_eq, np.zeros(n_gram)])

    c = np.zeros(N)
    for blk, i, j, v in problem.cost:
        idx, scale = var_index(blk, i, j)
        c[idx] += scale * v
    if q:
        c[n_gram:] = problem.free_cost

    cones = [clarabel.ZeroConeT(m)]
    for s in sizes:
        cones.append(
            clarabel.NonnegativeConeT(-s) if s < 0 else clarabel.PSDTriangleConeT(s)
        )
    settings = clarabel.DefaultSettings()
    settings.verbose = verbose
    settings.max_iter = max_iters
    if static_reg is not None:
        settings.static_regularization_constant = static_reg
    solver = clarabel.DefaultSolver(sp.csc_matrix((N, N)), c, A, b_full, cones, settings)
    result = solver.solve()

    raw = str(result.status)
    if raw == "Solved":
        status = "optimal"
    elif raw == "PrimalInfeasible":
        status = "infeasible"
    elif raw == "DualInfeasible":
        status = "unbounded"
    else:
        status = "iteration-limit"

    def unpack(vec: np.ndarray) -> list[np.ndarray]:
        mats = []
        for blk, s in enumerate(sizes):
            if s < 0:
                mats.append(np.diag(vec[offsets[blk] : offsets[blk] - s]))
                continue
            seg = vec[offsets[blk] : offsets[blk] + s * (s + 1) // 2]
            M = np.zeros((s, s))
            pos = 0
            for jj in range(s):
                for ii in range(jj + 1):
                    val = seg[pos]
                    if ii != jj:
                        val /= rt2
                    M[ii, jj] = val
                    M[jj, ii] = val
                    pos += 1
            mats.append(M)
        return mats

    x = np.asarray(result.x)
    z = np.asarray(result.z)
    X = unpack(x[:n_gram])
    S = unpack(z[m:])
    y = -z[:m] / row_norm
    pobj = float(result.obj_val)
    dobj = float(problem.b @ y)
    return SdpSolution(
        X=X,
        y=y,
        S=S,
        free_values=x[n_gram:].copy(),
        status=status,
        primal_objective=pobj,
        dual_objective=dobj,
        gap=abs(pobj - dobj),
        iterations=int(result.iterations),
        message=raw,
    )


def _scale_stacked(P: sp.csr_matrix, row_scale: np.ndarray, nb: int) -> sp.csr_matrix:
    scale = np.repeat(1.0 / row_scale, nb)
    return sp.diags(scale) @ P


def _c_norm(C: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(Cb * Cb) for Cb in C)))


def _inv_psd(M: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        # Roundoff can push the smallest eigenvalue slightly negative near
        # convergence; invert on a floor-clipped eigendecomposition instead.
        w, V = np.linalg.eigh(0.5 * (M + M.T))
        floor = max(float(w[-1]), 1.0) * 1e-14
        w = np.maximum(w, floor)
        return (V / w) @ V.T
    Linv = np.linalg.solve(L, np.eye(M.shape[0]))
    return Linv.T @ Linv


def _factor(M: np.ndarray):
    import scipy.linalg as sla

    jitter = 0.0
    base = np.trace(M) / max(M.shape[0], 1)
    for attempt in range(6):
        try:
            return sla.cho_factor(
                M + jitter * np.eye(M.shape[0]), lower=True, check_finite=False
            )
        except np.linalg.LinAlgError:
            jitter = max(1e-14 * base, jitter * 100.0, 1e-30)
    raise np.linalg.LinAlgError("Schur complement not positive definite")


def _solve_with(fac, rhs):
    import scipy.linalg as sla

    return sla.cho_solve(fac, rhs, check_finite=False)


def _min_step(mats, dmats, factor: float) -> float:
    step = 1.0 / factor
    for M, dM in zip(mats, dmats):
        step = min(step, _max_step(M, dM))
    return min(1.0, factor * step)


def random_certified_instance(
    seed: int,
    block_sizes: Sequence[int],
    m: int,
    density: float = 0.5,
) -> tuple[SdpStandardForm, float]:
    """Random standard-form instance with a known optimum embedded.

    A strictly complementary primal-dual pair (X*, y*, S*) is constructed
    first; b and C are then chosen to certify it, so the optimal objective
    <C, X*> = b.y* is known exactly.
    """
    rng = np.random.default_rng(seed)
    sizes = [int(s) for s in block_sizes]
    Xs, Ss = [], []
    for nb in sizes:
        Q, _ = np.linalg.qr(rng.normal(size=(nb, nb)))
        k = rng.integers(1, nb) if nb > 1 else 1
        lam_x = np.zeros(nb)
        lam_s = np.zeros(nb)
        lam_x[:k] = rng.uniform(0.5, 2.0, size=k)
        lam_s[k:] = rng.uniform(0.5, 2.0, size=nb - k)
        Xs.append(Q @ np.diag(lam_x) @ Q.T)
        Ss.append(Q @ np.diag(lam_s) @ Q.T)
    ystar = rng.normal(size=m)
    constraints: list[list[Entry]] = []
    b = np.zeros(m)
    for ci in range(m):
        ents: list[Entry] = []
        for blk, nb in enumerate(sizes):
            count = max(1, int(density * nb))
            for _ in range(count):
                i, j = sorted(rng.integers(0, nb, size=2))
                ents.append((blk, int(i), int(j), float(rng.normal())))
        constraints.append(ents)
        acc = 0.0
        for blk, i, j, v in ents:
            acc += v * Xs[blk][i, j] * (1.0 if i == j else 2.0)
        b[ci] = acc
    # C = A^T(y*) + S*
    Cmats = [Sb.copy() for Sb in Ss]
    for ci, ents in enumerate(constraints):
        for blk, i, j, v in ents:
            Cmats[blk][i, j] += v * ystar[ci]
            if i != j:
                Cmats[blk][j, i] += v * ystar[ci]
    cost: list[Entry] = []
    for blk, Cb in enumerate(Cmats):
        for i in range(sizes[blk]):
            for j in range(i, sizes[blk]):
                if abs(Cb[i, j]) > 0.0:
                    cost.append((blk, i, j, float(Cb[i, j])))
    problem = SdpStandardForm(
        block_sizes=tuple(sizes), constraints=constraints, b=b, cost=cost
    )
    opt_obj = float(sum(np.vdot(Cb, Xb) for Cb, Xb in zip(Cmats, Xs)))
    return problem, opt_obj
