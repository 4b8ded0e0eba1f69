"""Measure-to-measure flows on the unit sphere with explicit schedule synthesis."""

from .dynamics import (
    AttentionMode,
    Direction,
    FeedbackLaw,
    FlowResult,
    ParamSchedule,
    Segment,
    TransformerParams,
    attention,
    flow_map,
    integrate,
    vector_field,
)
from .geometry import SphericalCap, geodesic_distance, geodesic_point, in_cap, project_tangent
from .measures import (
    Coupling,
    EmpiricalMeasure,
    concentrate_mass_orthant,
    linearly_separable,
    mean,
    pushforward,
    support_diameter,
    wasserstein2,
    wasserstein2_sinkhorn,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionMode",
    "Coupling",
    "Direction",
    "EmpiricalMeasure",
    "FeedbackLaw",
    "FlowResult",
    "ParamSchedule",
    "Segment",
    "SphericalCap",
    "TransformerParams",
    "attention",
    "concentrate_mass_orthant",
    "flow_map",
    "geodesic_distance",
    "geodesic_point",
    "in_cap",
    "integrate",
    "linearly_separable",
    "mean",
    "project_tangent",
    "pushforward",
    "support_diameter",
    "vector_field",
    "wasserstein2",
    "wasserstein2_sinkhorn",
]
