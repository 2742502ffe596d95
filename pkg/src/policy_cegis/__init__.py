"""Counterexample-guided learning of linear-in-parameters feedback policies
from an MPC demonstrator."""

__version__ = "0.1.0"
