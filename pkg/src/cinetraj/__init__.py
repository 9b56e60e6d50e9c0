"""Smooth quadrotor camera trajectories from sparse 5-DOF keyframes."""

__version__ = "0.1.0"
