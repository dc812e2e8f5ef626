"""Equivariant graph neural cellular automata.

A single distance-based graph convolution is used as a recurrent transition
rule over a graph of nodes carrying coordinates, hidden features and
(optionally) velocities. The package provides the rule itself, trainers for
pattern formation, graph autoencoding and trajectory imitation, ground-truth
flocking/n-body simulators, evaluation metrics, and a command line front end.
"""

from .tensor import Tensor, Tape, NonFiniteError, gradient_check
from .graphs import Graph, GeometricGraph, DatasetSplit
from .egc import EGCParams, AutomatonState, egc_forward, egnn_forward, make_egc_params
from .automaton import RolloutRecord, init_state, rollout, damage, dynamic_rollout

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "gradient_check",
    "Graph",
    "GeometricGraph",
    "DatasetSplit",
    "EGCParams",
    "AutomatonState",
    "egc_forward",
    "egnn_forward",
    "make_egc_params",
    "RolloutRecord",
    "init_state",
    "rollout",
    "damage",
    "dynamic_rollout",
]
