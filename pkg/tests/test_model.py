import itertools

import pytest
import torch

from refineseg import PromptSet, RefinerModel
from refineseg.config import MODULE_NAMES
from refineseg.model import upsample_logits

from .conftest import autograd_of, central_difference, point_prompt, randomize_, relative_error, tiny_config

ALL_SUBSETS = [frozenset(c) for k in range(4) for c in itertools.combinations(MODULE_NAMES, k)]


def prompts():
    return [point_prompt(8, 9), PromptSet(box=(4, 5, 20, 27))]


def test_bypass_matches_baseline_pipeline(tiny_model):
    randomize_(tiny_model, 0.2)
    tiny_model.set_modules(())
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        out = tiny_model.forward_image(x, prompts())
        assert torch.equal(out.final_logits, tiny_model.baseline_forward(x, prompts()))
        assert torch.equal(out.final_logits, upsample_logits(out.selected, 32))
    assert out.refinement is None


@pytest.mark.parametrize("modules", ALL_SUBSETS, ids=lambda m: ",".join(sorted(m)) or "none")
def test_shapes_do_not_depend_on_modules(tiny_model, modules):
    tiny_model.set_modules(modules)
    with torch.no_grad():
        out = tiny_model.forward_image(torch.rand(2, 3, 32, 32), prompts())
    assert out.final_logits.shape == (2, 1, 32, 32)
    assert out.selected.shape == (2, 1, 8, 8)
    assert out.renewed.shape == (2, 16, 2, 2)
    if "mr" in modules:
        assert len(out.refinement.intermediates) == 3


def test_fresh_refiner_starts_at_baseline(tiny_model):
    # zero/identity initialised update paths: LA and PR alone leave the output unchanged
    randomize_(tiny_model, 0.2)
    tiny_model.reset_refiner(0)
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        ref = tiny_model.baseline_forward(x, prompts())
        for modules in ({"la"}, {"pr"}, {"la", "pr"}):
            tiny_model.set_modules(modules)
            assert torch.allclose(tiny_model(x, prompts()), ref, atol=1e-5)


def test_la_only_changes_decoder_input(tiny_model):
    randomize_(tiny_model, 0.2)
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        tiny_model.set_modules({"pr", "mr"})
        off = tiny_model.forward_image(x, prompts()[:1])
        tiny_model.set_modules({"la", "pr", "mr"})
        enc = tiny_model.encode(x)
        assert torch.equal(enc.pyramid.f16, tiny_model.encode(x, with_crops=False).pyramid.f16)
        on = tiny_model.forward_image(x, prompts()[:1], encoded=enc)
        assert not torch.equal(on.feature, off.feature)
        tiny_model.la.cross.attn.out_proj.weight.zero_()
        tiny_model.la.cross.attn.out_proj.bias.zero_()
        zeroed = tiny_model.forward_image(x, prompts()[:1], encoded=enc)
    assert torch.equal(zeroed.feature, off.feature)
    assert torch.equal(zeroed.final_logits, off.final_logits)


def test_forward_is_deterministic(tiny_model):
    randomize_(tiny_model, 0.2)
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(tiny_model(x, prompts()), tiny_model(x, prompts()))


def test_prompt_count_mismatch(tiny_model):
    with pytest.raises(ValueError):
        tiny_model(torch.rand(2, 3, 32, 32), prompts()[:1])


def test_parameter_groups_partition(tiny_model):
    base = {n for n, _ in tiny_model.baseline_named_parameters()}
    refiner = {n for n, _ in tiny_model.refiner_named_parameters(MODULE_NAMES)}
    every = {n for n, _ in tiny_model.named_parameters()}
    assert base.isdisjoint(refiner) and base | refiner == every
    assert tiny_model.refiner_named_parameters(()) == []


def test_end_to_end_gradient_spot_check(tiny_model64):
    model = randomize_(tiny_model64, 0.2)
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    w = torch.randn(1, 1, 32, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    p = prompts()[:1]
    fn = lambda img: (model(img, p) * w).sum()
    idx = torch.randperm(x.numel(), generator=torch.Generator().manual_seed(5))[:24].tolist()
    numeric = central_difference(fn, x, indices=idx).view(-1)[idx]
    analytic = autograd_of(fn, x).view(-1)[idx]
    assert relative_error(analytic, numeric) < 1e-2


def test_every_intermediate_head_gets_gradient(tiny_model):
    randomize_(tiny_model, 0.2)
    out = tiny_model.forward_image(torch.rand(1, 3, 32, 32), prompts()[:1])
    for head, inter in zip(tiny_model.mr.heads, out.refinement.intermediates):
        head.zero_grad()
        grads = torch.autograd.grad(inter.sum(), list(head.parameters()), retain_graph=True)
        assert any(g.abs().sum() > 0 for g in grads)


def test_config_width_mismatch_is_projected():
    model = RefinerModel(tiny_config(c16=24))
    assert model.feature_proj is not None
    with torch.no_grad():
        assert model(torch.rand(1, 3, 32, 32), prompts()[:1]).shape == (1, 1, 32, 32)
