"""Data-driven bilinear Koopman surrogates with constraint-tightening certificates."""

from .certify import (
    Certificate,
    CertificationConfig,
    ConstraintSet,
    ConstraintVerdict,
    certify,
    constraint_coefficients,
    soundness_trial,
    validate_certificate,
)
from .dictionary import (
    Dictionary,
    FemMesh,
    Observable,
    ObservableCoeffs,
    composite_dictionary,
    eval_dict,
    eval_dict_grad,
    fem_dictionary,
    monomial_dictionary,
    project,
)
from .dynamics import (
    ControlAffineSystem,
    ControlSignal,
    StateDomain,
    Trajectory,
    check_domain,
    duffing,
    eval_rhs,
    integrate,
    linear_1d,
    random_zoh,
    saturating_1d,
    time_grid,
)
from .edmd import (
    EdmdFit,
    GeneratorMatrix,
    SampleSet,
    build_matrices,
    fit_controls,
    galerkin_reference,
    generator_error,
    reference_generators,
    sample_iid,
)
from .errors import (
    DivergenceError,
    KoopmanError,
    NumericalError,
    RankDeficiencyError,
    UsageError,
)
from .scenario import Scenario
from .surrogate import (
    BilinearSurrogate,
    EdmdcModel,
    assemble_surrogate,
    fit_edmdc,
    predict_edmdc,
    predict_observable,
    propagate,
    surrogate_generator_at,
)

__version__ = "0.1.0"
