"""Harmonic-metric heat flow on flat complex vector bundles.

Numerical laboratory for flat bundles over the unit circle and the unit
square torus: decompose a flat connection relative to a background metric,
run the heat flow that drives it toward a harmonic configuration, build the
invariant filtration / graded object of the monodromy family, and test
whether the flow limit is isomorphic to that graded object.
"""

from .bundle import (
    BaseGrid,
    ConnectionField,
    GaugeField,
    circle,
    connection_from_json,
    connection_to_json,
    decompose,
    flatness_residual,
    gauge_apply,
    make_constant_connection,
    metric_from_gauge,
    monodromy,
    monodromy_family,
    orthogonal_projector,
    torus,
)
from .errors import (
    BranchCutError,
    ConditioningError,
    FlowFailure,
    HflabError,
    SingularMatrixError,
    StructuralError,
    ValidationError,
)
from .flow import (
    FlowConfig,
    FlowResult,
    FlowState,
    MonitorSeries,
    bochner_residual,
    energy,
    flow_step,
    gauge_step,
    run_flow,
    tension,
)
from .jordan_holder import (
    EXACT_TOLS,
    LIMIT_TOLS,
    Filtration,
    GradedObject,
    RepFamily,
    ToleranceProfile,
    character_distance,
    graded,
    jh_filtration,
    minimal_invariant_subspace,
    semisimplify,
)
from .linalg import (
    BackgroundMetric,
    adjoint_wrt,
    eig,
    expm,
    geometric_multiplicity,
    herm_split,
    inner_product,
    logm_principal,
    norm_sq,
)
from .verify import (
    IsoVerdict,
    SubbundleTrace,
    eta_trace,
    is_semisimple,
    iso_check,
    projection_trace,
    second_fundamental_form,
)

__version__ = "0.1.0"
