"""Decision-focused learning of building thermal models through a
differentiable day-ahead HVAC scheduling QP."""

__version__ = "0.1.0"
