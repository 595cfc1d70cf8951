import numpy as np
import pytest
import torch

from refineseg import ModelConfig, PromptSet, RefinerModel


def central_difference(fn, x: torch.Tensor, eps: float = 1e-6, indices=None) -> torch.Tensor:
    """Central finite differences of scalar ``fn`` w.r.t. ``x`` (float64), element by element."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn(x))
            flat[i] = orig - eps
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def autograd_of(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-12)
    return num / den


def tiny_config(**kw):
    base = dict(resolution=32, c4=8, c8=16, c16=16, c_embed=16, c_low=4, num_heads=2, pool_kernels=(1, 2, 4))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return RefinerModel(tiny_config()).eval()


@pytest.fixture
def tiny_model64():
    torch.manual_seed(0)
    return RefinerModel(tiny_config()).double().eval()


def randomize_(module, scale=0.1, seed=0):
    """Overwrite every parameter with small random values (so zero-initialised layers are live)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * scale)
    return module


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def point_prompt(x, y, label=1):
    return PromptSet(points=[[x, y]], labels=[label])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
