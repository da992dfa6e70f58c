"""Discrete BMO norms, functional Taylor bounds and W^{1,BMO} local-minimizer checks.

Modules:

* :mod:`~bmotaylor.grid`: box grids, tensor fields, cubes, prefix tables, GF1 I/O
* :mod:`~bmotaylor.bmo`: BMO seminorm/norm and interpolation constants
* :mod:`~bmotaylor.integrand`: integrands with closed-form derivatives
* :mod:`~bmotaylor.taylor`: Taylor expansion, remainder and its bounds
* :mod:`~bmotaylor.variational`: energies, Euler-Lagrange solver, stress tests
* :mod:`~bmotaylor.cli`: batch driver writing JSON/CSV reports
"""

__version__ = "0.1.0"

from .exceptions import ConfigurationError, DomainError, PreconditionError, ResourceError
from .grid import (
    Cube,
    Grid,
    PrefixTable,
    ScalarGridFunction,
    TensorField,
    count_cubes,
    cube_mean,
    cube_oscillation,
    enumerate_cubes,
    gradient,
    linf_norm,
    lp_norm,
    read_gf1,
    write_gf1,
)
from .bmo import (
    NormReport,
    InterpolationReport,
    bmo_norm,
    bmo_seminorm,
    bmo_seminorm_bruteforce,
    calibrate_j1,
    calibrate_j2,
    calibration_family,
    embedding_ratio,
    interpolation_ratio,
    linf_domination_check,
)
from .integrand import (
    Integrand,
    Weight,
    check_growth,
    double_well,
    fd_derivative_check,
    integrand_from_config,
    p_growth,
    quadratic,
)
from .taylor import (
    TaylorReport,
    bound_constants,
    expansion_terms,
    remainder_quadrature,
    verify_taylor_inequality,
)
from .variational import (
    BoundaryCondition,
    Equilibrium,
    StressReport,
    el_residual,
    energy,
    first_variation,
    minimizer_stress_test,
    remark_q_variant,
    second_variation,
    second_variation_lambda_min,
    solve_el,
)
