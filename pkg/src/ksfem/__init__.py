"""Finite-element Kohn-Sham solver with a convergence-rate test bench."""

__version__ = "0.1.0"

from .mesh import Mesh, Quadrature, build_uniform_mesh, quadrature_rule
from .fem import (
    DensityField,
    FeFunction,
    FeSpace,
    density_from_orbitals,
    evaluate_at_points,
    load_vector,
    norms,
    project_function,
)
from .sparse import cg_solve, dense_eig, lobpcg_solve
from .physics import (
    ModelSystem,
    Nucleus,
    Projector,
    PseudoSpec,
    XcFunctional,
    coulomb_D,
    make_system,
    solve_hartree,
)
from .ksdft import (
    GroundState,
    OrbitalSet,
    ScfConfig,
    direct_minimize,
    energy,
    load_ground_state,
    orthonormalize,
    save_ground_state,
    scf_solve,
)
from .analysis import (
    convergence_study,
    fit_slope,
    hessian_apply,
    infsup_audit,
    procrustes_align,
    tangent_split,
    write_rate_csv,
)

__all__ = [
    "Mesh",
    "Quadrature",
    "build_uniform_mesh",
    "quadrature_rule",
    "DensityField",
    "FeFunction",
    "FeSpace",
    "density_from_orbitals",
    "evaluate_at_points",
    "load_vector",
    "norms",
    "project_function",
    "cg_solve",
    "dense_eig",
    "lobpcg_solve",
    "ModelSystem",
    "Nucleus",
    "Projector",
    "PseudoSpec",
    "XcFunctional",
    "coulomb_D",
    "make_system",
    "solve_hartree",
    "GroundState",
    "OrbitalSet",
    "ScfConfig",
    "direct_minimize",
    "energy",
    "load_ground_state",
    "orthonormalize",
    "save_ground_state",
    "scf_solve",
    "convergence_study",
    "fit_slope",
    "hessian_apply",
    "infsup_audit",
    "procrustes_align",
    "tangent_split",
    "write_rate_csv",
]
