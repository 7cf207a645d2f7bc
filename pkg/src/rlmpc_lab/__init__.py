"""Rotary inverted pendulum control lab.

Linear MPC as a condensed quadratic program, downsampled-reference MPC, a
neural-network surrogate of the MPC law, and two DDPG-based residual
controllers, benchmarked on a simulated plant with deliberate parameter
mismatch."""

__version__ = "0.1.0"
