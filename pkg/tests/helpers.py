"""Test utilities: central-difference gradient oracle and small configs."""
from __future__ import annotations

import math

import torch

from sharecmp.config import EncoderConfig


def micro_encoder_config(**kw) -> EncoderConfig:
    base = dict(dims=(8, 8, 8, 8), depths=(1, 1, 1, 1), heads=(2, 2, 2, 2), sr_ratios=(2, 1, 1, 1))
    base.update(kw)
    return EncoderConfig(**base)


def randomize_(module: torch.nn.Module, generator: torch.Generator, scale: float = 0.3):
    """Fill every parameter with random values so no gradient is trivially zero."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale)


def finite_difference_check(loss_fn, params: dict[str, torch.Tensor], eps: float = 1e-6, max_per_tensor: int = 0, seed: int = 0):
    """Compare autograd gradients with central differences.

    Returns {name: relative error} where the relative error of a tensor is
    ||g_autograd - g_fd|| / max(||g_autograd||, ||g_fd||) over the checked
    elements (all elements unless ``max_per_tensor`` caps them).
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    gen = torch.Generator().manual_seed(seed)
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = torch.arange(flat.numel())
            if max_per_tensor and flat.numel() > max_per_tensor:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_per_tensor]
            num = torch.empty(len(idx), dtype=p.dtype)
            for k, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                num[k] = (up - down) / (2 * eps)
            ana = analytic[name].view(-1)[idx]
            denom = max(ana.norm().item(), num.norm().item())
            errors[name] = 0.0 if denom < 1e-12 else (ana - num).norm().item() / denom
    return errors


def assert_gradients_match(errors: dict[str, float], tol: float = 1e-4):
    bad = {k: v for k, v in errors.items() if not (v < tol and math.isfinite(v))}
    assert not bad, f"gradient mismatch (rel err >= {tol}): {bad}"
