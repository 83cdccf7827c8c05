"""Certificate synthesis tests: program assembly, compilation, recovery."""

import json
import math

import numpy as np
import pytest

from invariantkit import (
    Polynomial,
    Region,
    SwitchedSystem,
    ball_moments,
    build_sos_program,
    certificate_from_json,
    certificate_to_json,
    compile_to_sdp,
    compute_ball,
    monomial_basis,
    recover_certificate,
    solve_with_reduction,
    verify_certificate,
)
from invariantkit.sos import (
    _drop_dependent_rows,
    gram_polynomial,
    row_residual,
)

P = Polynomial


def example1():
    f1 = P(3, {(1, 0, 0): 0.4, (0, 1, 0): 0.6})
    f2 = P(3, {(1, 0, 1): 1.0, (0, 1, 0): 0.9})
    return SwitchedSystem(
        state_dim=2,
        pert_dim=1,
        x0_constraints=(P(2, {(2, 0): 1.0, (0, 2): 1.0, (0, 0): -1.0}),),
        regions=(Region(((P(2, {(0, 0): -1.0}), "<="),)),),
        dynamics=((f1, f2),),
        pert_constraints=(P(1, {(2,): 1.0, (0,): -0.01}),),
        pert_box=np.array([[-0.1, 0.1]]),
        name="example1",
    )


def identity_system(n=2):
    maps = tuple(P.variable(n, i) for i in range(n))
    return SwitchedSystem(
        state_dim=n,
        pert_dim=0,
        x0_constraints=(
            P(n, {tuple(2 * (j == i) for j in range(n)): 1.0 for i in range(n)})
            - P.constant(n, 1.0),
        ),
        regions=(Region(((P(n, {(0,) * n: -1.0}), "<="),)),),
        dynamics=(maps,),
        pert_constraints=(),
        pert_box=np.zeros((0, 2)),
    )


def test_monomial_basis_count():
    # C(n + d, d) monomials up to total degree d
    assert len(monomial_basis(2, 4)) == 15
    assert len(monomial_basis(3, 2)) == 10
    assert monomial_basis(2, 1) == ((0, 0), (0, 1), (1, 0))


def test_compute_ball_identity_map():
    # enclosure of the identity is the box itself: R = 1.05 * sum(max^2)
    sysm = identity_system(3)
    assert compute_ball(sysm, [[-1, 1]] * 3) == pytest.approx(1.05 * 3)


def test_compute_ball_example1_boxes():
    sysm = example1()
    assert compute_ball(sysm, [[-1, 1]] * 2) == pytest.approx(2.1)
    assert compute_ball(sysm, [[-1.1, 1.1]] * 2) == pytest.approx(2.541)


def test_compute_ball_rejects_bad_box():
    with pytest.raises(ValueError):
        compute_ball(example1(), [[1.0, -1.0], [-1.0, 1.0]])


def test_ball_moments_known_values():
    R = 1.7
    mom = ball_moments(2, R, 4)
    assert mom[(0, 0)] == pytest.approx(math.pi * R)  # area of the disk
    assert mom[(1, 0)] == 0.0 and mom[(1, 2)] == 0.0  # odd symmetry
    assert mom[(2, 0)] == pytest.approx(math.pi * R**2 / 4.0)
    assert mom[(2, 2)] == pytest.approx(math.pi * R**3 / 24.0)


def test_ball_moments_match_monte_carlo():
    R, n = 1.3, 2
    mom = ball_moments(n, R, 4)
    rng = np.random.default_rng(5)
    count = 200_000
    g = rng.standard_normal((count, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    pts = g * (math.sqrt(R) * rng.random(count) ** (1.0 / n))[:, None]
    volume = math.pi * R
    for exps in [(2, 0), (0, 2), (2, 2), (4, 0)]:
        vals = pts[:, 0] ** exps[0] * pts[:, 1] ** exps[1]
        est = volume * float(np.mean(vals))
        sigma = volume * float(np.std(vals)) / math.sqrt(count)
        assert abs(est - mom[exps]) <= 3.0 * sigma


def test_build_program_slot_layout():
    prog = build_sos_program(example1(), 0.9, 4, 4, 4, [[-1, 1]] * 2)
    assert [row.label for row in prog.rows] == ["dyn1", "state1"]
    dyn, state = prog.rows
    # the region constraint of example1 is constant, so it gets no slot
    assert [s.label for s in dyn.slots] == ["dyn1.gram", "dyn1.pert1", "dyn1.ball"]
    assert [s.label for s in state.slots] == ["state1.gram", "state1.ball"]
    assert dyn.num_vars == 3 and state.num_vars == 2
    assert prog.num_coefficients == len(monomial_basis(2, 4)) == 15
    assert prog.objective.shape == (15,)


def test_build_program_rejects_bad_degrees():
    sysm = example1()
    with pytest.raises(ValueError):
        build_sos_program(sysm, 1.0, 5, 4, 4, [[-1, 1]] * 2)  # odd d_u
    with pytest.raises(ValueError):
        build_sos_program(sysm, 1.5, 4, 4, 4, [[-1, 1]] * 2)  # alpha > 1
    with pytest.warns(UserWarning):
        build_sos_program(sysm, 1.0, 4, 3, 4, [[-1, 1]] * 2)  # odd d_s bumped


def test_facial_reduction_shrinks_alpha_one_bases():
    sysm = example1()
    full = build_sos_program(sysm, 1.0, 4, 4, 4, [[-1, 1]] * 2, facial_reduction=False)
    red = build_sos_program(sysm, 1.0, 4, 4, 4, [[-1, 1]] * 2)
    sides_full = [s.side for s in full.rows[0].slots]
    sides_red = [s.side for s in red.rows[0].slots]
    assert sides_red[0] < sides_full[0]  # origin is a fixed point of subsystem 1
    # restricted bases still live in the span of the original monomials
    for slot in red.rows[0].slots:
        for p in slot.basis:
            assert p.degree() <= max(q.degree() for q in full.rows[0].slots[0].basis)


def test_gram_polynomial_expands_square():
    basis = [P.constant(1, 1.0), P.variable(1, 0)]
    G = np.array([[1.0, 1.0], [1.0, 1.0]])
    got = gram_polynomial(basis, G)
    assert got == (P.constant(1, 1.0) + P.variable(1, 0)) ** 2


def test_presolve_drops_duplicate_rows():
    from invariantkit import SdpStandardForm, solve_sdp

    base = SdpStandardForm(
        block_sizes=(2,),
        constraints=[
            [(0, 0, 0, 1.0), (0, 1, 1, 1.0)],
            [(0, 0, 0, 2.0), (0, 1, 1, 2.0)],  # duplicate of row 0 scaled
            [(0, 0, 1, 1.0)],
        ],
        b=np.array([1.0, 2.0, 0.2]),
        cost=[(0, 0, 0, 1.0)],
    )
    reduced = _drop_dependent_rows(base)
    assert reduced.m == 2
    sol = solve_sdp(reduced)
    assert sol.status == "optimal"
    # the dropped row is still satisfied by the solution
    X = sol.X[0]
    assert 2.0 * (X[0, 0] + X[1, 1]) == pytest.approx(2.0, abs=1e-6)


def test_recover_requires_optimal_status():
    from invariantkit import SdpSolution

    problem = compile_to_sdp(
        build_sos_program(example1(), 0.9, 2, 2, 2, [[-1, 1]] * 2)
    )
    bad = SdpSolution(
        X=[],
        y=np.zeros(0),
        S=[],
        free_values=np.zeros(0),
        status="iteration-limit",
        primal_objective=0.0,
        dual_objective=0.0,
        gap=1.0,
        iterations=1,
    )
    with pytest.raises(ValueError):
        recover_certificate(problem, bad)


def test_end_to_end_synthesis_degree_four():
    # full pipeline on the contracting two-dimensional switched system
    sysm = example1()
    problem = compile_to_sdp(build_sos_program(sysm, 1.0, 4, 4, 4, [[-1, 1]] * 2))
    sol, reduced = solve_with_reduction(problem)
    assert sol.status == "optimal"
    assert sol.primal_objective == pytest.approx(3.277580, abs=5e-4)
    cert = recover_certificate(reduced, sol)
    # row identities hold to solver accuracy
    for row in reduced.program.rows:
        resid = row_residual(reduced, cert, row)
        worst = max((abs(c) for c in resid.terms.values()), default=0.0)
        assert worst <= 1e-6
    report = verify_certificate(sysm, cert, samples=20_000, seed=1)
    assert report.passed
    # degree 4 is too loose for a nonempty sublevel set on this system
    # (that needs degree 10+); soundness still requires u(0) >= -0.5,
    # the state-row bound at the X0 constraint value -1
    assert cert.u([0.0, 0.0]) >= -0.5 - 1e-6
    # serialization round trip preserves everything
    back = certificate_from_json(certificate_to_json(cert))
    assert back.u == cert.u
    assert back.alpha == cert.alpha and back.R == cert.R
    assert set(back.multipliers) == set(cert.multipliers)


def test_certificate_json_includes_report():
    u = P(2, {(0, 0): -0.5, (2, 0): 1.0, (0, 2): 1.0})
    from invariantkit.sos import Certificate, VerificationReport

    report = VerificationReport(
        samples=10,
        seed=3,
        dynamic_margin=0.1,
        state_margin=0.2,
        containment_failures=0,
        closure_margin=-0.3,
        set_samples=4,
        min_u=-0.5,
        unmatched_states=0,
    )
    cert = Certificate(u=u, multipliers={}, alpha=1.0, R=2.1, report=report)
    doc = json.loads(certificate_to_json(cert))
    assert doc["report"]["passed"] is True
    back = certificate_from_json(certificate_to_json(cert))
    assert back.report.set_samples == 4
    assert back.report.passed
