"""Multi-agent task-execution kernel: contract review, ReAct execution,
execution verification, weighted evaluation and adversarial discussion."""

__version__ = "0.1.0"
