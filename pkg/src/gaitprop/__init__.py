"""Invertible networks and biologically plausible credit assignment.

Exact-inverse dense and convolutional layers, BP / FA / TP / GAIT-prop
learning rules, and diagnostics measuring how closely each rule's weight
updates follow backpropagation.
"""

from .credit import (
    FeedbackMatrices,
    OptimizerState,
    TargetState,
    UpdateSet,
    adam_step,
    bp_backward,
    fa_backward,
    gp_backward,
    orthogonality_update,
    output_target,
    tp_backward,
)
from .diagnostics import AngleRecord, angle_report, finite_difference_grads, target_distance_trace, update_angle
from .layers import ConvLayer, DenseLayer, ForwardCache, Network, build_network
from .linalg import invert_square, l2_norm, orthogonal_init

__version__ = "0.1.0"
