"""Closed-form schedule synthesis for measure steering on the sphere."""

from .base import (
    GateSpec,
    SynthesisError,
    SynthesisReport,
    constant_drift_params,
    gate_off_cap,
    gate_on_cap,
)
from .clustering import ClusterRun, cluster_measure, synth_cluster_single
from .disentangle import (
    synth_barycenter_isolation,
    synth_decolinearize,
    synth_disentangle,
)
from .matching import synth_point_match
from .squash import synth_feedback_disentangle, synth_squash_to_circle
from .transport import (
    synth_compression,
    synth_orthant_transport,
    synth_tubular_chain,
    synth_two_balls,
)

__all__ = [
    "ClusterRun",
    "GateSpec",
    "SynthesisError",
    "SynthesisReport",
    "cluster_measure",
    "constant_drift_params",
    "gate_off_cap",
    "gate_on_cap",
    "synth_barycenter_isolation",
    "synth_cluster_single",
    "synth_compression",
    "synth_decolinearize",
    "synth_disentangle",
    "synth_feedback_disentangle",
    "synth_point_match",
    "synth_squash_to_circle",
    "synth_orthant_transport",
    "synth_tubular_chain",
    "synth_two_balls",
]
