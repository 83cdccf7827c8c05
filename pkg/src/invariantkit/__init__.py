"""Robust invariant sets for switched discrete-time polynomial systems.

Two complementary pipelines: grid value iteration on the worst-case
Bellman fixed point (maximal set, low dimensions) and sum-of-squares
certificate synthesis compiled to a semidefinite program (sound inner
approximations, scales further), cross-checked by a brute-force
simulation oracle.
"""

from .polynomials import Polynomial
from .systems import (
    PartitionReport,
    Region,
    RegionDispatchError,
    SwitchedSystem,
    normalize_constraint_value,
    region_of,
    step,
    validate_system,
)
from .simulate import (
    PerturbationGrid,
    Trajectory,
    estimate_invariant_grid,
    rollout,
    truncated_value,
)
from .valueiter import (
    StateGrid,
    ValueField,
    ViConfig,
    bellman_backup,
    build_grid,
    dp_residual,
    extract_zero_set,
    interpolate,
    solve_value_iteration,
)
from .sdp import (
    SdpOptions,
    SdpSolution,
    SdpStandardForm,
    check_psd,
    random_certified_instance,
    solve_sdp,
    solve_sdp_clarabel,
    solve_sdp_scs,
)
from .sdpa import (
    SdpaParseError,
    export_sdpa,
    export_solution,
    import_sdpa,
    import_solution,
)
from .sos import (
    Certificate,
    SdpProblem,
    SosProgram,
    VerificationReport,
    ball_moments,
    build_sos_program,
    certificate_from_json,
    certificate_to_json,
    compile_to_sdp,
    compute_ball,
    monomial_basis,
    recover_certificate,
    solve_program,
    solve_with_reduction,
    verify_certificate,
)

__all__ = [
    "Polynomial",
    "Region",
    "RegionDispatchError",
    "SwitchedSystem",
    "PartitionReport",
    "normalize_constraint_value",
    "region_of",
    "step",
    "validate_system",
    "PerturbationGrid",
    "Trajectory",
    "rollout",
    "truncated_value",
    "estimate_invariant_grid",
    "StateGrid",
    "ValueField",
    "ViConfig",
    "build_grid",
    "bellman_backup",
    "solve_value_iteration",
    "dp_residual",
    "extract_zero_set",
    "interpolate",
    "SdpStandardForm",
    "SdpSolution",
    "SdpOptions",
    "solve_sdp",
    "solve_sdp_clarabel",
    "solve_sdp_scs",
    "check_psd",
    "random_certified_instance",
    "SdpaParseError",
    "export_sdpa",
    "import_sdpa",
    "export_solution",
    "import_solution",
    "Certificate",
    "SdpProblem",
    "SosProgram",
    "VerificationReport",
    "ball_moments",
    "build_sos_program",
    "certificate_from_json",
    "certificate_to_json",
    "compile_to_sdp",
    "compute_ball",
    "monomial_basis",
    "recover_certificate",
    "solve_program",
    "solve_with_reduction",
    "verify_certificate",
]

__version__ = "0.1.0"
