"""Shared test utilities.

The finite-difference gradient checker here is the oracle for all analytic
gradient tests: it never trusts autograd, only forward evaluations in double
precision.
"""

from __future__ import annotations

import torch


def fd_gradient(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of a scalar-valued ``fn`` at ``x``.

    ``x`` must be a double-precision tensor; the result has the same shape.
    """
    assert x.dtype == torch.float64, "finite differences need float64 inputs"
    x = x.detach()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn(x).detach())
        flat[i] = orig - eps
        lo = float(fn(x).detach())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_gradient(fn, x: torch.Tensor, eps: float = 1e-5, rtol: float = 1e-4) -> float:
    """Compare autograd against central differences; return the relative error.

    Relative error is ``||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, 1e-12)``.
    Raises AssertionError when it exceeds ``rtol``.
    """
    x = x.detach().clone().double().requires_grad_(True)
    out = fn(x)
    out.backward()
    g_ad = x.grad.detach().clone()
    g_fd = fd_gradient(fn, x.detach().clone())
    num = (g_ad - g_fd).norm().item()
    den = max(g_ad.norm().item(), g_fd.norm().item(), 1e-12)
    rel = num / den
    assert rel < rtol, f"gradient mismatch: rel err {rel:.3e} >= {rtol:.1e}"
    return rel


def make_rng(seed: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g
