import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from clipag.encoders import EncoderConfig, build_model  # noqa: E402

torch.set_num_threads(1)

TINY = dict(image_size=8, width=16, embed_dim=8, text_width=16, context_length=12)


def tiny_model(arch: str = "conv_small", seed: int = 0, dtype=torch.float64, **overrides):
    """Small randomly initialised encoder for contract and gradient tests."""
    kw = {**TINY, **overrides}
    return build_model(EncoderConfig(arch=arch, **kw), seed=seed).to(dtype)


ARCHS = ["toy_mlp", "conv_small", "vit_small_patch4"]


@pytest.fixture(params=ARCHS)
def arch(request):
    return request.param


@pytest.fixture
def model64(arch):
    return tiny_model(arch)


@pytest.fixture
def images64():
    g = torch.Generator().manual_seed(0)
    return torch.rand((2, 3, 8, 8), generator=g, dtype=torch.float64)


@pytest.fixture(scope="session")
def zoo(request):
    from desk import build_zoo

    return build_zoo(request.config.cache.mkdir("desk_zoo"))


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
