"""daehn: physics-constrained regression with hard differential-algebraic
constraints enforced by a differentiable KKT projection layer."""

__version__ = "0.1.0"
