"""Distributed event-triggered nonlinear MPC for cooperative rendezvous."""

__version__ = "0.1.0"
