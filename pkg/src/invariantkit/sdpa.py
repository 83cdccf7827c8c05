"""SDPA sparse-format import/export plus a plain-text solution format.

Problem files follow the .dat-s layout:

    m
    nBlock
    block sizes (negative = diagonal block)
    b_1 ... b_m
    matno blkno i j value        (1-based, upper triangular, i <= j)

with matno 0 carrying the cost matrix C and matno k >= 1 the constraint
matrix A_k of the standard form  min <C,X>  s.t. <A_k,X> = b_k, X PSD.
Entry lines are emitted in deterministic (matno, blkno, i, j) order.
Free scalar variables are not representable in .dat-s; they are split
into a +/- diagonal block pair on export (see SdpStandardForm.split_free).

Solution files are line-oriented:

    status <word>
    objective <primal> <dual>
    y <m values>
    X blk i j value              (1-based, upper triangular)
    S blk i j value
"""

from __future__ import annotations

import numpy as np

from .sdp import Entry, SdpSolution, SdpStandardForm


class SdpaParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


def _fmt(x: float) -> str:
    return repr(float(x))


def export_sdpa(problem: SdpStandardForm) -> str:
    """Serialize a standard-form problem as SDPA sparse text."""
    prob = problem.split_free()
    lines = [str(prob.m), str(len(prob.block_sizes))]
    lines.append(" ".join(str(s) for s in prob.block_sizes))
    lines.append(" ".join(_fmt(v) for v in prob.b))
    entries: list[tuple[int, int, int, int, float]] = []
    for blk, i, j, v in prob.cost:
        entries.append((0, blk + 1, i + 1, j + 1, v))
    for ci, ents in enumerate(prob.constraints):
        for blk, i, j, v in ents:
            entries.append((ci + 1, blk + 1, i + 1, j + 1, v))
    entries.sort(key=lambda e: e[:4])
    for matno, blk, i, j, v in entries:
        lines.append(f"{matno} {blk} {i} {j} {_fmt(v)}")
    return "\n".join(lines) + "\n"


def import_sdpa(text: str) -> SdpStandardForm:
    """Parse SDPA sparse text back into a standard-form problem."""
    raw = [
        (no + 1, line.split("//")[0].split('"')[0].strip())
        for no, line in enumerate(text.splitlines())
    ]
    rows = [(no, line) for no, line in raw if line and not line.startswith("*")]
    if len(rows) < 4:
        raise SdpaParseError(len(raw), "truncated file: missing header")

    def parse_int(no, token, what):
        try:
            return int(token)
        except ValueError:
            raise SdpaParseError(no, f"expected integer {what}, got {token!r}")

    no, line = rows[0]
    m = parse_int(no, line.split()[0], "constraint count")
    no, line = rows[1]
    nblock = parse_int(no, line.split()[0], "block count")
    no, line = rows[2]
    tokens = line.replace(",", " ").replace("(", " ").replace(")", " ").split()
    if len(tokens) != nblock:
        raise SdpaParseError(no, f"expected {nblock} block sizes, got {len(tokens)}")
    block_sizes = tuple(parse_int(no, t, "block size") for t in tokens)
    no, line = rows[3]
    tokens = line.replace(",", " ").split()
    if len(tokens) != m:
        raise SdpaParseError(no, f"expected {m} objective constants, got {len(tokens)}")
    try:
        b = np.array([float(t) for t in tokens])
    except ValueError:
        raise SdpaParseError(no, "malformed objective constant")

    cost: list[Entry] = []
    constraints: list[list[Entry]] = [[] for _ in range(m)]
    for no, line in rows[4:]:
        tokens = line.split()
        if len(tokens) != 5:
            raise SdpaParseError(no, f"expected 5 fields, got {len(tokens)}")
        matno = parse_int(no, tokens[0], "matrix number")
        blk = parse_int(no, tokens[1], "block number")
        i = parse_int(no, tokens[2], "row index")
        j = parse_int(no, tokens[3], "column index")
        try:
            v = float(tokens[4])
        except ValueError:
            raise SdpaParseError(no, f"malformed value {tokens[4]!r}")
        if not 0 <= matno <= m:
            raise SdpaParseError(no, f"matrix number {matno} outside 0..{m}")
        if not 1 <= blk <= nblock:
            raise SdpaParseError(no, f"block number {blk} outside 1..{nblock}")
        if i > j:
            i, j = j, i
        entry: Entry = (blk - 1, i - 1, j - 1, v)
        if matno == 0:
            cost.append(entry)
        else:
            constraints[matno - 1].append(entry)
    return SdpStandardForm(
        block_sizes=block_sizes, constraints=constraints, b=b, cost=cost
    )


def export_solution(solution: SdpSolution) -> str:
    lines = [f"status {solution.status}"]
    lines.append(
        f"objective {_fmt(solution.primal_objective)} {_fmt(solution.dual_objective)}"
    )
    lines.append("y " + " ".join(_fmt(v) for v in solution.y))
    for label, mats in (("X", solution.X), ("S", solution.S)):
        for blk, M in enumerate(mats):
            for i in range(M.shape[0]):
                for j in range(i, M.shape[1]):
                    if M[i, j] != 0.0:
                        lines.append(f"{label} {blk + 1} {i + 1} {j + 1} {_fmt(M[i, j])}")
    return "\n".join(lines) + "\n"


def import_solution(
    text: str,
    problem: SdpStandardForm,
    feas_tol: float = 1e-8,
    gap_tol: float = 1e-8,
    psd_tol: float = 1e-8,
) -> SdpSolution:
    """Parse a solution file and validate it against the problem invariants.

    Raises ValueError with the worst violation if the claimed-optimal
    solution is primal-infeasible, not PSD within tolerance, or carries a
    larger-than-allowed duality gap.
    """
    if problem.free_dim:
        problem = problem.split_free()
    sizes = [abs(s) for s in problem.block_sizes]
    status = None
    pobj = dobj = None
    y = None
    X = [np.zeros((nb, nb)) for nb in sizes]
    S = [np.zeros((nb, nb)) for nb in sizes]
    for no, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.strip()
        if not line or line.startswith("*"):
            continue
        tokens = line.split()
        kind = tokens[0]
        if kind == "status":
            if len(tokens) != 2:
                raise SdpaParseError(no, "status line needs one word")
            status = tokens[1]
        elif kind == "objective":
            if len(tokens) != 3:
                raise SdpaParseError(no, "objective line needs two values")
            pobj, dobj = float(tokens[1]), float(tokens[2])
        elif kind == "y":
            try:
                y = np.array([float(t) for t in tokens[1:]])
            except ValueError:
                raise SdpaParseError(no, "malformed y value")
            if y.shape[0] != problem.m:
                raise SdpaParseError(
                    no, f"y has {y.shape[0]} entries, expected {problem.m}"
                )
        elif kind in ("X", "S"):
            if len(tokens) != 5:
                raise SdpaParseError(no, "matrix entry needs blk i j value")
            blk, i, j = int(tokens[1]) - 1, int(tokens[2]) - 1, int(tokens[3]) - 1
            v = float(tokens[4])
            if not 0 <= blk < len(sizes) or not 0 <= i <= j < sizes[blk]:
                raise SdpaParseError(no, "matrix entry indices out of range")
            target = X if kind == "X" else S
            target[blk][i, j] = v
            target[blk][j, i] = v
        else:
            raise SdpaParseError(no, f"unknown record {kind!r}")
    if status is None or y is None:
        raise SdpaParseError(0, "missing status or y record")

    com = problem.compiled()
    violations: list[str] = []
    prim_res = float(np.max(np.abs(com.apply_A(X) - problem.b))) if problem.m else 0.0
    if prim_res > feas_tol:
        violations.append(f"primal residual {prim_res:.3e} > {feas_tol:.1e}")
    for label, mats in (("X", X), ("S", S)):
        for blk, M in enumerate(mats):
            if M.size == 0:
                continue
            min_eig = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
            if min_eig < -psd_tol:
                violations.append(
                    f"{label} block {blk + 1} min eigenvalue {min_eig:.3e}"
                )
    pv = sum(float(np.vdot(Cb, Xb)) for Cb, Xb in zip(com.C, X))
    dv = float(problem.b @ y)
    gap = abs(pv - dv) / (1.0 + abs(pv) + abs(dv))
    if status == "optimal" and gap > 10.0 * gap_tol:
        violations.append(f"relative duality gap {gap:.3e} > {10.0 * gap_tol:.1e}")
    if violations and status == "optimal":
        raise ValueError("solution rejected: " + "; ".join(violations))
    return SdpSolution(
        X=X,
        y=y,
        S=S,
        free_values=np.zeros(0),
        status=status,
        primal_objective=pv if pobj is None else pobj,
        dual_objective=dv if dobj is None else dobj,
        gap=abs(pv - dv),
        iterations=0,
    )
