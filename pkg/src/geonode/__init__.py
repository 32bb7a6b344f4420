"""Optimising potential-shaping and damping-injection controllers on SE(3)
with an adjoint method that works directly on the Lie group."""

from . import adjoint, atlas, config, diff, dynamics, gradcheck, integrate, lie, training
from .adjoint import CostSpec, RigidBodySystem, cost_and_gradient, total_cost
from .dynamics import BodyParams, ControllerSpec, NNController, NullController, QuadraticController
from .integrate import SolverConfig, lie_integrate
from .lie import SE3, SO3, Pose, ProductElement

__version__ = "0.1.0"
