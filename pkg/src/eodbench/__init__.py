"""Battery end-of-discharge workbench: surrogate simulator, datasets, chunked-token
transformer and baselines, training, and RTE/probe evaluation."""

__version__ = "0.1.0"
