"""Composite training objective: mean absolute error plus weighted SSIM loss.

    L = L_MAE + lambda * (1 - SSIM(pred, target)),  lambda = 0.5

The SSIM term uses the same 11x11 window and stability constants as the
evaluation metric, so train-time and eval-time SSIM are the same function.
Everything here is torch and differentiable; the numpy implementation in
``crossdose.metrics`` serves as the independent reference.  The MAE kink is
handled the torch way: the subgradient of |z| at z = 0 is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .metrics import SsimParams, ssim_window


@dataclass(frozen=True)
class LossConfig:
    ssim_weight: float = 0.5  # lambda
    ssim: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        if self.ssim_weight < 0:
            raise ValidationError("ssim_weight must be >= 0")


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    if t.dim() == 2:
        return t.unsqueeze(0).unsqueeze(0)
    if t.dim() == 3:
        return t.unsqueeze(1)
    if t.dim() == 4:
        if t.shape[1] != 1:
            raise ValidationError(f"expected single-channel images, got {t.shape[1]} channels")
        return t
    raise ValidationError(f"expected 2-D, 3-D or 4-D tensor, got dim {t.dim()}")


def _check_shapes(pred: torch.Tensor, target: torch.Tensor):
    p, t = _as_batch(pred), _as_batch(target)
    if p.shape != t.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return p, t


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p, t = _check_shapes(pred, target)
    return (p - t).abs().mean()


def ssim_index(pred: torch.Tensor, target: torch.Tensor,
               params: SsimParams = SsimParams()) -> torch.Tensor:
    """Differentiable mean SSIM over valid window positions, per slice, then
    averaged over the batch."""
    p, t = _check_shapes(pred, target)
    k = params.window_size
    if p.shape[-2] < k or p.shape[-1] < k:
        raise ValidationError(f"image {tuple(p.shape[-2:])} smaller than the {k}x{k} window")
    w = torch.as_tensor(ssim_window(params), dtype=p.dtype, device=p.device)
    w = w.view(1, 1, k, k)
    mu_p = F.conv2d(p, w)
    mu_t = F.conv2d(t, w)
    mu_pp = F.conv2d(p * p, w)
    mu_tt = F.conv2d(t * t, w)
    mu_pt = F.conv2d(p * t, w)
    var_p = mu_pp - mu_p**2
    var_t = mu_tt - mu_t**2
    cov = mu_pt - mu_p * mu_t
    L = params.dynamic_range
    c1 = (params.k1 * L) ** 2
    c2 = (params.k2 * L) ** 2
    s = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / ((mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2))
    return s.mean(dim=(1, 2, 3)).mean()


def ssim_loss(pred: torch.Tensor, target: torch.Tensor,
              params: SsimParams = SsimParams()) -> torch.Tensor:
    return 1.0 - ssim_index(pred, target, params)


def loss_terms(pred: torch.Tensor, target: torch.Tensor,
               cfg: LossConfig) -> dict[str, torch.Tensor]:
    """Total loss and its two components (all scalar tensors with grad)."""
    mae = mae_loss(pred, target)
    sl = ssim_loss(pred, target, cfg.ssim)
    return {"total": mae + cfg.ssim_weight * sl, "mae": mae, "ssim_loss": sl}


def total_loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    return loss_terms(pred, target, cfg)["total"]


def numeric_gradient(pred: np.ndarray, target: np.ndarray, cfg: LossConfig,
                     eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of total_loss w.r.t. every pred pixel.

    Double-precision oracle for the analytic (autograd) gradient; intended for
    tests, not training.
    """
    pred = np.asarray(pred, dtype=np.float64)
    grad = np.zeros_like(pred)
    t = torch.as_tensor(np.asarray(target, dtype=np.float64))
    flat = pred.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(total_loss(torch.as_tensor(pred), t, cfg))
        flat[i] = orig - eps
        lo = float(total_loss(torch.as_tensor(pred), t, cfg))
        flat[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return grad
