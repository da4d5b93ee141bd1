"""Gradient- and sampling-based attribution methods over torch models.

Every explainer maps one (C,H,W) input to a (C,H,W) attribution tensor for
the model's predicted class (or an explicit target). The exporter aggregates
channels by summing before writing interchange files.
"""

from __future__ import annotations

import math

import torch

EXPLAINERS = ("saliency", "input_x_gradient", "gradient_shap", "kernel_shap")


def _target_class(model: torch.nn.Module, x: torch.Tensor) -> int:
    with torch.no_grad():
        return int(model(x[None]).argmax(dim=1)[0])


def _gradient(model: torch.nn.Module, x: torch.Tensor, target: int) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    out = model(x[None])[0, target]
    out.backward()
    return x.grad.detach()


def saliency(model, x: torch.Tensor, target: int | None = None) -> torch.Tensor:
    """Absolute input gradient of the target class score."""
    target = _target_class(model, x) if target is None else target
    return _gradient(model, x, target).abs()


def input_x_gradient(model, x: torch.Tensor, target: int | None = None) -> torch.Tensor:
    """Signed input times gradient."""
    target = _target_class(model, x) if target is None else target
    return x.detach() * _gradient(model, x, target)


def gradient_shap(
    model,
    x: torch.Tensor,
    target: int | None = None,
    n_samples: int = 16,
    stdev: float = 0.1,
    seed: int = 0,
) -> torch.Tensor:
    """Expected gradients along noisy baseline-to-input paths.

    Baselines are zero tensors plus Gaussian noise; one uniform interpolation
    point per sample. Deterministic for a fixed seed.
    """
    target = _target_class(model, x) if target is None else target
    gen = torch.Generator().manual_seed(seed)
    total = torch.zeros_like(x)
    for _ in range(n_samples):
        baseline = torch.randn(x.shape, generator=gen) * stdev
        alpha = torch.rand(1, generator=gen).item()
        point = baseline + alpha * (x - baseline)
        grad = _gradient(model, point, target)
        total += grad * (x - baseline)
    return total / n_samples


def _shapley_kernel_weights(m: int, sizes: torch.Tensor) -> torch.Tensor:
    weights = torch.empty(sizes.shape, dtype=torch.float64)
    for i, s in enumerate(sizes.tolist()):
        weights[i] = (m - 1) / (math.comb(m, s) * s * (m - s))
    return weights


def _patch_masks(shape: tuple[int, int], grid: tuple[int, int]) -> torch.Tensor:
    """(M,H,W) boolean patch indicators for a gy x gx grid."""
    h, w = shape
    gy, gx = grid
    ys = torch.div(torch.arange(h) * gy, h, rounding_mode="floor").clamp(max=gy - 1)
    xs = torch.div(torch.arange(w) * gx, w, rounding_mode="floor").clamp(max=gx - 1)
    patch_of = ys[:, None] * gx + xs[None, :]
    return torch.stack([(patch_of == p) for p in range(gy * gx)])


def kernel_shap(
    model,
    x: torch.Tensor,
    target: int | None = None,
    patch_grid: tuple[int, int] = (4, 4),
    n_samples: int = 512,
    seed: int = 0,
    batch_limit: int = 64,
) -> torch.Tensor:
    """Shapley-kernel weighted least squares over a coarse patch grid.

    Coalitions mask whole patches to the zero baseline. All 2^M - 2 proper
    coalitions are enumerated when feasible, otherwise `n_samples` are drawn.
    The efficiency constraint (attributions sum to f(x) - f(baseline)) is
    enforced by variable elimination; each patch's value is spread uniformly
    over its pixels, so patch sums equal the Shapley values.
    """
    target = _target_class(model, x) if target is None else target
    c, h, w = x.shape
    patches = _patch_masks((h, w), patch_grid)
    m = patches.shape[0]
    if m < 2:
        raise ValueError("kernel_shap needs at least two patches")

    if 2 ** m - 2 <= n_samples:
        codes = torch.arange(1, 2 ** m - 1)
        z = ((codes[:, None] >> torch.arange(m)) & 1).bool()
    else:
        gen = torch.Generator().manual_seed(seed)
        sizes = torch.randint(1, m, (n_samples,), generator=gen)
        z = torch.zeros((n_samples, m), dtype=torch.bool)
        for i, s in enumerate(sizes.tolist()):
            idx = torch.randperm(m, generator=gen)[:s]
            z[i, idx] = True

    keep = (z[:, :, None, None] & patches[None]).any(dim=1)  # (S,H,W)
    masked = torch.where(keep[:, None], x[None], torch.zeros_like(x)[None])
    outs = []
    with torch.no_grad():
        for i in range(0, masked.shape[0], batch_limit):
            outs.append(model(masked[i : i + batch_limit])[:, target])
        v_full = model(x[None])[0, target]
        v_empty = model(torch.zeros_like(x)[None])[0, target]
    y = torch.cat(outs).double() - v_empty.double()
    total = (v_full - v_empty).double()

    weights = _shapley_kernel_weights(m, z.sum(dim=1))
    a = z.double()
    # eliminate the last patch via the efficiency constraint
    b = a[:, :-1] - a[:, -1:]
    rhs = y - a[:, -1] * total
    sw = weights.sqrt()
    phi_rest = torch.linalg.lstsq(b * sw[:, None], rhs * sw).solution
    phi = torch.cat([phi_rest, (total - phi_rest.sum()).reshape(1)])

    flat = torch.zeros((h, w), dtype=torch.float64)
    for p in range(m):
        flat[patches[p]] = phi[p] / int(patches[p].sum())
    return (flat[None] / c).repeat(c, 1, 1).float()


def run_explainer(name: str, model, x: torch.Tensor, target: int | None = None,
                  seed: int = 0) -> torch.Tensor:
    if name == "saliency":
        return saliency(model, x, target)
    if name == "input_x_gradient":
        return input_x_gradient(model, x, target)
    if name == "gradient_shap":
        return gradient_shap(model, x, target, seed=seed)
    if name == "kernel_shap":
        return kernel_shap(model, x, target, seed=seed)
    raise ValueError(f"unknown explainer {name!r}; expected one of {EXPLAINERS}")
