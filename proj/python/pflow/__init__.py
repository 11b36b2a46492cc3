"""Probability-flow ODE likelihoods, PNG complexity and likelihood attacks."""

import json

from ._core import *  # noqa: F401,F403
from ._core import run_experiment as _run_experiment


def run(config, output_dir=None, seed=None, workers=None, smoke=False):
    """Run an experiment config. Returns (exit_code, output_dir, summary dict)."""
    code, out, summary = _run_experiment(str(config), output_dir, seed, workers, smoke)
    return code, out, json.loads(summary)
