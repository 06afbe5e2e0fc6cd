"""Metrics, training, rollout and experiment suites."""
