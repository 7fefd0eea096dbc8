"""Datasets, configuration, training schedule, checkpoints and the toy corpus."""
