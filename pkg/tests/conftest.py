import numpy as np
import pytest

from mmnet.autodiff import Tensor

SEEDS = list(range(10))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


def toy_config(scales=(4, 5), size=(64, 64), channels=3, **flags):
    """A tiny float64-friendly model: every stage present, few channels."""
    from mmnet.config import EncoderConfig, LSAConfig, ModelConfig, SEMConfig

    return ModelConfig(
        encoder=EncoderConfig.uniform((2, 3, 3, 4, 4), blocks=2, input_size=size),
        sem=SEMConfig(dilations=(1, 4, 8, 12), branch_channels=3),
        lsa=LSAConfig(r=3, inner_channels=2),
        channels=channels,
        scales=scales,
        **flags,
    )


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
