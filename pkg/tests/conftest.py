import numpy as np
import pytest
import torch

from ccl_grounding.model import ModelConfig, init_params
from ccl_grounding.synthetic_data import SyntheticConfig, generate_dataset


@pytest.fixture(scope="session")
def tiny_split():
    cfg = SyntheticConfig(num_samples=24, num_test=8, T=8, D_v=6, D_q=5, N_range=(1, 3),
                          concept_dim=4, labeled_fraction=0.25, seed=11)
    return generate_dataset(cfg)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(D_v=6, D_q=5, D=16, enc_layers=1, dec_layers=1, heads=2, ffn_dim=32)


@pytest.fixture
def tiny_model(tiny_model_cfg):
    return init_params(tiny_model_cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting -------------------------------------------------
# Tests marked ``criterion(n, title)`` report one PASS/FAIL line each in the
# terminal summary, taken from the real test outcome.

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    ok = rep.passed if rep.when == "call" else not rep.failed
    prev = _CRITERIA.get(number, (title, True, ""))
    detail = getattr(item, "criterion_detail", "")
    _CRITERIA[number] = (title, prev[1] and ok and not rep.skipped, detail or prev[2])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
