"""Step-wise preference data pipeline for code-agent tool use.

Synthesizes tasks, samples and executes candidate steps, selects preferred
steps with a model verifier, stores step-wise preference pairs, and provides
a numerically verified preference-tuning objective plus dataset diagnostics.
"""

__version__ = "0.1.0"
