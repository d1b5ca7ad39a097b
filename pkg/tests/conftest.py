from __future__ import annotations

import numpy as np
import pytest

from treeformer import autodiff as ad
from treeformer.encoder import TreeformerConfig, TreeformerParams


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


def make_params(d: int, seed: int = 0, H: int = 8, **kw) -> tuple[TreeformerConfig, TreeformerParams]:
    config = TreeformerConfig(d=d, H=H, **kw)
    return config, TreeformerParams.init(config, np.random.default_rng(seed))


def random_tokens(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(size=(n, d))


# acceptance verdicts, filled by tests/test_acceptance.py and echoed at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
