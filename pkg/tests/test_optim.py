import pytest
import torch

from tokmem.errors import ConfigError, NonFiniteError
from tokmem.optim import AdamWState, OptimHyper, adamw_step, clip_grad_norm


def test_first_step_worked_example():
    p = [torch.tensor([1.0], dtype=torch.float64)]
    adamw_step(p, [torch.tensor([1.0], dtype=torch.float64)], AdamWState(), OptimHyper(lr=0.1))
    assert p[0].item() == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-12)


def test_zero_grad_fixed_point_and_pure_decay():
    p = [torch.tensor([2.0, -3.0])]
    adamw_step(p, [torch.zeros(2)], AdamWState(), OptimHyper(lr=0.1))
    assert p[0].tolist() == [2.0, -3.0]
    p = [torch.tensor([2.0, -3.0], dtype=torch.float64)]
    adamw_step(p, [torch.zeros(2, dtype=torch.float64)], AdamWState(), OptimHyper(lr=0.1, weight_decay=0.5))
    assert p[0].tolist() == pytest.approx([2.0 - 0.1, -3.0 + 0.15])


def test_matches_torch_adamw_over_many_steps():
    g = torch.Generator().manual_seed(0)
    mine = [torch.randn(5, 3, generator=g, dtype=torch.float64)]
    ref = mine[0].clone().requires_grad_(True)
    hyper = OptimHyper(lr=0.01, weight_decay=0.1)
    opt = torch.optim.AdamW([ref], lr=0.01, weight_decay=0.1, betas=(0.9, 0.999), eps=1e-8)
    state = AdamWState()
    for _ in range(25):
        grad = torch.randn(5, 3, generator=g, dtype=torch.float64)
        adamw_step(mine, [grad.clone()], state, hyper)
        ref.grad = grad.clone()
        opt.step()
    assert state.step == 25
    assert torch.allclose(mine[0], ref.detach(), atol=1e-12, rtol=0)


def test_nonfinite_gradient_aborts():
    p = [torch.ones(3)]
    with pytest.raises(NonFiniteError, match="non-finite"):
        adamw_step(p, [torch.tensor([1.0, float("nan"), 0.0])], AdamWState(), OptimHyper())
    assert p[0].tolist() == [1.0, 1.0, 1.0]


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step([torch.ones(3)], [torch.ones(2)], AdamWState(), OptimHyper())


def test_clip_grad_norm():
    gs = [torch.tensor([3.0]), torch.tensor([4.0])]
    assert clip_grad_norm(gs, 1.0) == pytest.approx(5.0)
    assert torch.cat(gs).norm().item() == pytest.approx(1.0, rel=1e-5)
    small = [torch.tensor([0.3])]
    clip_grad_norm(small, 1.0)
    assert small[0].item() == pytest.approx(0.3)


def test_hyper_defaults_and_validation():
    assert (OptimHyper.tokmem().lr, OptimHyper.tokmem().weight_decay) == (5e-3, 0.0)
    assert (OptimHyper.finetune().lr, OptimHyper.finetune().weight_decay) == (5e-5, 1e-2)
    assert OptimHyper().batch_size == 4
    with pytest.raises(ConfigError):
        OptimHyper(lr=0)
