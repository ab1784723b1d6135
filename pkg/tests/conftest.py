import importlib

import numpy as np
import pytest

from flexio.data import SyntheticSpec, default_bounds, generate_synthetic
from flexio.model import Hyperparams

fit_mod = importlib.import_module("flexio.fit")


@pytest.fixture(scope="session")
def small_fit():
    """Alternating fit on 8 synthetic days (T=4) plus 3 held-out days."""
    spec = SyntheticSpec(T=4, S=11, t_max=2, seed=5, noise_sigma=0.02, env_slope=(1.0, 1.0, 1.0))
    ds, truth, dec = generate_synthetic(spec)
    train, test = ds.split(8)
    p, c = spec.tariff()
    cfg = fit_mod.FitConfig(hyper=Hyperparams(t_max=2), day_max_nodes=200)
    result = fit_mod.fit(list(train.days), default_bounds(train), [p] * 8, [c] * 8, cfg)
    return {"spec": spec, "train": train, "test": test, "prices": p, "costs": c, "result": result}


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
