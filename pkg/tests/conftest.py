import pytest
import torch

from promptseg.data import build_dataset, default_tasks
from promptseg.model import ModelConfig, build_model

TINY = ModelConfig(widths=(8, 16, 24, 32), prompt_dim=16, heads=4, head_width=8)


@pytest.fixture(scope="session")
def tasks():
    return default_tasks(2)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, tasks):
    root = tmp_path_factory.mktemp("ds")
    manifest = build_dataset(16, tasks, (32, 32), 123, root)
    return manifest


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=0)


@pytest.fixture
def tiny_model64():
    torch.manual_seed(0)
    return build_model(TINY, seed=0).double()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
