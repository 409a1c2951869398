import numpy as np
import pytest
import torch

from faprompt.backbone import BackboneConfig, ToyBackbone

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def finite_difference(f, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (float64)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(f())
            flat[i] = orig - step
            lo = float(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def assert_grad_matches(f, x: torch.Tensor, rtol: float = 1e-3, step: float = 1e-4):
    """Autograd gradient vs central differences, relative to the gradient's scale."""
    x.grad = None
    f().backward()
    analytic = x.grad.detach().clone()
    numeric = finite_difference(f, x, step)
    scale = max(numeric.abs().max().item(), 1e-8)
    err = (analytic - numeric).abs().max().item()
    assert err <= rtol * scale, f"max abs err {err:.3e} > {rtol} * {scale:.3e}"
    return err / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_backbone():
    cfg = BackboneConfig(
        embedding_dim=8,
        token_dim=8,
        deep_prompt_depth=2,
        deep_prompt_length=3,
        text_layers=3,
        patch_size=4,
        input_size=(16, 16),
        seed=7,
    )
    return ToyBackbone(cfg).double()


@pytest.fixture
def toy_backbone_64():
    return ToyBackbone(BackboneConfig(embedding_dim=16, token_dim=16, input_size=(32, 32), seed=0))
