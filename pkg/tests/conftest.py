import sys

import pytest

from ndpmoe.config import HardwareConfig, WorkloadConfig, SyntheticTraceParams, model_profile


@pytest.fixture
def hw():
    return HardwareConfig()


@pytest.fixture
def mixtral():
    return model_profile("mixtral-8x7b")


@pytest.fixture
def qwen():
    return model_profile("qwen3-30b-a3b")


@pytest.fixture
def deepseek():
    return model_profile("deepseek-moe")


def small_workload(seed=0, skew=1.2, rho=0.8, prompt=32, output=16):
    return WorkloadConfig(prompt_len=prompt, output_len=output,
                          trace=SyntheticTraceParams(seed=seed, zipf_skew=skew, rho=rho))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.result_line(n))
