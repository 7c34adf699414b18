"""Compositional neural Markov kernel for particle cascades in a material cube.

The generative model factorizes each single-cube interaction into a discrete
per-species count model and a Riemannian conditional-flow-matching model over
the outgoing particles' surface positions, directions, and energies.  A toy
mechanistic Monte Carlo oracle provides training data and ground truth;
two-sample metrics, exact likelihoods, solver Pareto sweeps, and zero-shot
multi-cube rollouts evaluate the result.
"""

from . import (assign, cardinality, cfm, cli, compose, dataset, flow,
               manifold, metrics, net, oracle)
from .cardinality import CardinalityModel, CardinalityTrainConfig, train_cardinality
from .cfm import (BaseConfig, BaseMode, CouplingConfig, CouplingKind,
                  FlowModel, FlowTrainConfig, KAPPA_ISOTROPIC,
                  KAPPA_PHYSICAL, train_flow)
from .compose import DensitySchedule, RolloutState, rollout, rollouts
from .dataset import (EventRecord, PriorKind, PriorSpec, read_events,
                      sample_conditions, write_events)
from .flow import SolverConfig, SolverMethod, log_likelihood, sample_events
from .manifold import ManifoldSpec, ProductPoint, ProductTangent
from .metrics import MetricReport, classifier_auc, energy_distance, mmd, summarize
from .oracle import Condition, Event, ParticleState, ToyPhysicsConfig, simulate_event

__version__ = "0.1.0"

__all__ = [
    "assign", "cardinality", "cfm", "cli", "compose", "dataset", "flow",
    "manifold", "metrics", "net", "oracle",
    "CardinalityModel", "CardinalityTrainConfig", "train_cardinality",
    "BaseConfig", "BaseMode", "CouplingConfig", "CouplingKind", "FlowModel",
    "FlowTrainConfig", "KAPPA_ISOTROPIC", "KAPPA_PHYSICAL", "train_flow",
    "DensitySchedule", "RolloutState", "rollout", "rollouts",
    "EventRecord", "PriorKind", "PriorSpec", "read_events",
    "sample_conditions", "write_events",
    "SolverConfig", "SolverMethod", "log_likelihood", "sample_events",
    "ManifoldSpec", "ProductPoint", "ProductTangent",
    "MetricReport", "classifier_auc", "energy_distance", "mmd", "summarize",
    "Condition", "Event", "ParticleState", "ToyPhysicsConfig",
    "simulate_event",
    "__version__",
]
