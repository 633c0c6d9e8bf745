"""Training objectives: ensemble-aware distortion and the rate-distortion loss.

The ensemble-aware loss ranks members per pixel by channel-summed squared
error and clips every member's contribution at the k-th smallest one, so
members that disagree with the target at a pixel stop being pulled toward it
there. Two gradient conventions are supported, selected by ``clip_mode``:

* ``route_to_kth`` (default): the clipped term is a live reference to the
  k-th best member's error, so that member receives one extra gradient
  contribution per clipped member.
* ``detach_clipped``: the clip value is detached; clipped members get zero
  gradient and the k-th best member receives no extra copies.

Both modes produce the same loss value.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch import Tensor

from .ensemble import EnsemblePrediction

CLIP_MODES = ("route_to_kth", "detach_clipped")


@dataclasses.dataclass
class LossReport:
    """One training/eval step's loss breakdown. Rates are bits per pixel."""

    total: Tensor | float
    rate_mv_bpp: Tensor | float
    rate_res_bpp: Tensor | float
    distortion_mse: Tensor | float
    per_member_mse: list[float] = dataclasses.field(default_factory=list)


def kth_smallest_index(per_member_loss: Tensor | np.ndarray | list, k: int) -> int:
    """Index of the k-th smallest entry (1-based k); ties break to the lowest index."""
    losses = np.asarray(per_member_loss)
    if losses.ndim != 1:
        raise ValueError("expected a 1-D loss vector")
    if not 1 <= k <= losses.size:
        raise ValueError(f"k={k} out of range for {losses.size} members")
    order = np.argsort(losses, kind="stable")
    return int(order[k - 1])


def ensemble_aware_loss(
    x: Tensor,
    preds: EnsemblePrediction | Tensor,
    k: int,
    clip_mode: str = "route_to_kth",
) -> Tensor:
    """Sum over members of the mean per-pixel clipped squared error.

    ``x`` is (C, H, W) or (B, C, H, W); members stack one extra leading dim.
    Per pixel, each member contributes ``min(e_m, e_p)`` where ``e_p`` is the
    k-th smallest channel-summed squared error at that pixel.
    """
    if clip_mode not in CLIP_MODES:
        raise ValueError(f"clip_mode must be one of {CLIP_MODES}")
    members = preds.members if isinstance(preds, EnsemblePrediction) else preds
    h = members.shape[0]
    if not 1 <= k <= h:
        raise ValueError(f"k={k} out of range for h={h} members")
    if members.shape[1:] != x.shape:
        raise ValueError(
            f"member shape {tuple(members.shape[1:])} does not match target {tuple(x.shape)}"
        )

    err = ((members - x.unsqueeze(0)) ** 2).sum(dim=-3)  # (h, ..., H, W)
    sorted_err, _ = torch.sort(err, dim=0, stable=True)
    clip_value = sorted_err[k - 1].unsqueeze(0)
    if clip_mode == "detach_clipped":
        clip_value = clip_value.detach()
    clipped = err > clip_value
    loss_map = torch.where(clipped, clip_value.expand_as(err), err)
    per_member = loss_map.reshape(h, -1).mean(dim=1)
    return per_member.sum()


def rd_loss(
    rate_mv_bpp: Tensor | float,
    rate_res_bpp: Tensor | float,
    x: Tensor,
    x_hat: Tensor,
    lam: float,
    per_member_mse: list[float] | None = None,
) -> LossReport:
    """Rate plus ``lam`` times mean-squared distortion, all rates in bpp."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if float(rate_mv_bpp) < 0 or float(rate_res_bpp) < 0:
        raise ValueError("rates must be non-negative")
    if x.shape != x_hat.shape:
        raise ValueError("frame shapes differ")
    mse = torch.mean((x - x_hat) ** 2)
    total = rate_mv_bpp + rate_res_bpp + lam * mse
    if not bool(torch.isfinite(torch.as_tensor(float(total)))):
        raise ValueError("non-finite rate-distortion loss")
    return LossReport(
        total=total,
        rate_mv_bpp=rate_mv_bpp,
        rate_res_bpp=rate_res_bpp,
        distortion_mse=mse,
        per_member_mse=list(per_member_mse or []),
    )
