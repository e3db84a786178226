"""Scenario configuration, metrics, experiment matrix and the command line."""
