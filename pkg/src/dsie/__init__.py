"""Joint state/input dynamic estimation for branch-current microgrid models."""

from .errors import (
    AttackError,
    ConfigurationError,
    DsieError,
    NumericalError,
    ParameterError,
    PartitionError,
    SynchronizationError,
    TopologyError,
    UnobservableError,
)
from .network import (
    Branch,
    Bus,
    DiscreteModel,
    MeasurementLayout,
    NetworkTopology,
    build_discrete_model,
    check_observability,
    discretize,
    partition,
)
from .estimation import JointEstimate, MeasurementFrame, dsie_step, solve_batch_wls
from .units import Bases, NoiseSpec

__all__ = [
    "AttackError", "Bases", "Branch", "Bus", "ConfigurationError", "DiscreteModel", "DsieError",
    "JointEstimate", "MeasurementFrame", "MeasurementLayout", "NetworkTopology", "NoiseSpec",
    "NumericalError", "ParameterError", "PartitionError", "SynchronizationError", "TopologyError",
    "UnobservableError", "build_discrete_model", "check_observability", "discretize", "dsie_step",
    "partition", "solve_batch_wls",
]
