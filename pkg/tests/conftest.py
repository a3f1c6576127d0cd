import functools
import os

import numpy as np
import pytest

from smoothsqp.bilevel import BilevelProblem, build_combined_program
from smoothsqp.driver import SolverConfig, run_solver
from smoothsqp.registry import registry_lookup


def env_seed(default=0):
    return int(os.environ.get("SMOOTHSQP_SEED", default))


@pytest.fixture
def rng():
    return np.random.default_rng(env_seed())


class Run:
    def __init__(self, name):
        self.entry = registry_lookup(name)
        obj = self.entry.build()
        self.bilevel = obj if isinstance(obj, BilevelProblem) else None
        self.prob = build_combined_program(obj) if self.bilevel else obj
        self.cfg = SolverConfig(**self.entry.solver_defaults)
        self.result = run_solver(self.prob, self.entry.x0, self.cfg)


@functools.lru_cache(maxsize=None)
def solved(name):
    """Registry solves are deterministic, so every test module shares one run per problem."""
    return Run(name)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; every recorded line is printed in the terminal summary."""
    results = request.config.stash.get(ACCEPTANCE, None)
    if results is None:
        results = request.config.stash[ACCEPTANCE] = {}

    def report(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[number] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
