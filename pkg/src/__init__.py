"""
TQL Lab - Source Package

Exact and learned risk-sensitive distributional reinforcement learning:
return distributions, distortion risk measures, history-relied operators,
Trajectory Q-Learning and the experiment harness.
"""

__version__ = "1.0.0"
__author__ = "TQL Lab Developers"
__license__ = "MIT"

# Package metadata
__all__ = [
    "core",
    "cli",
]
