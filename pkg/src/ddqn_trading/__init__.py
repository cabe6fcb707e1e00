"""Dueling Double-DQN trading agent over a minute-bar market environment."""

__version__ = "0.1.0"
