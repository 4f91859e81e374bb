from __future__ import annotations

import pytest
from hypothesis import settings

from ctxserve.costmodel import ModelConfig, ParallelismConfig, get_hardware, get_model

settings.register_profile("default", deadline=None, derandomize=True)
settings.load_profile("default")


@pytest.fixture
def llama8b():
    return get_model("llama3-8b")


@pytest.fixture
def llama70b():
    return get_model("llama3-70b")


@pytest.fixture
def h100():
    return get_hardware("h100")


@pytest.fixture
def a100():
    return get_hardware("a100")


@pytest.fixture
def tp8():
    return ParallelismConfig(8, 1, 1)


def tiny_model(hq=2, hkv=1, d=4, layers=1, bpe=2, mlp=100.0):
    return ModelConfig(hq, hkv, d, layers, bpe, mlp)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        status, text = results[num]
        terminalreporter.write_line(f"C{num} {status} {text}")
