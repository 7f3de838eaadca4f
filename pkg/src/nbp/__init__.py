"""Factor-graph inference with exact oracles, classical belief propagation,
and a trainable neural belief propagation stack for toy scene graphs."""

__version__ = "0.1.0"
