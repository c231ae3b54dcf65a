"""Compositional adaptive subgoal estimation for one-shot imitation in a crafting grid world."""

__version__ = "0.1.0"
