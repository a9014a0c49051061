"""
TQL Lab - CLI Package

Command-line interface: counterexample tables, exact comparisons, training
runs and seed sweeps.
"""

from .cli_interface import TQLLabCLI, build_parser, main

__all__ = [
    "TQLLabCLI",
    "build_parser",
    "main",
]
