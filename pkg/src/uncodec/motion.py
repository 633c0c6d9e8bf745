"""Motion estimation and differentiable bilinear warping.

Flow convention is backward warping: ``output(p) = ref(p + flow(p))`` with
flow channel 0 holding the x (column) displacement and channel 1 the y (row)
displacement, both in pixels. Out-of-bounds sample coordinates clamp to the
image edge.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn


def bilinear_warp(ref: Tensor, flow: Tensor) -> Tensor:
    """Sample ``ref`` at ``p + flow(p)`` with bilinear interpolation.

    Accepts ``(C, H, W)`` or ``(B, C, H, W)`` references with a matching
    ``(..., 2, H, W)`` flow. Differentiable w.r.t. both inputs; at integer
    flow values the flow gradient is the right-continuous sub-gradient.
    """
    unbatched = ref.dim() == 3
    if unbatched:
        ref = ref.unsqueeze(0)
        flow = flow.unsqueeze(0)
    if ref.dim() != 4 or flow.dim() != 4:
        raise ValueError("expected (B, C, H, W) inputs")
    if flow.shape[1] != 2 or ref.shape[0] != flow.shape[0] or ref.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"ref {tuple(ref.shape)} and flow {tuple(flow.shape)} do not match")

    dtype = torch.promote_types(ref.dtype, flow.dtype)
    ref = ref.to(dtype)
    flow = flow.to(dtype)
    b, c, h, w = ref.shape
    device = ref.device

    xs = torch.arange(w, dtype=dtype, device=device).view(1, 1, w)
    ys = torch.arange(h, dtype=dtype, device=device).view(1, h, 1)
    x = (xs + flow[:, 0]).clamp(0, w - 1)
    y = (ys + flow[:, 1]).clamp(0, h - 1)

    x0 = x.floor()
    y0 = y.floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    flat = ref.reshape(b, c, h * w)

    def take(yi: Tensor, xi: Tensor) -> Tensor:
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00 = take(y0i, x0i)
    v01 = take(y0i, x1i)
    v10 = take(y1i, x0i)
    v11 = take(y1i, x1i)
    out = (
        v00 * (1 - wx) * (1 - wy)
        + v01 * wx * (1 - wy)
        + v10 * (1 - wx) * wy
        + v11 * wx * wy
    )
    return out.squeeze(0) if unbatched else out


def motion_mse_loss(x_t: Tensor, x_ref: Tensor, flow: Tensor) -> Tensor:
    """Mean squared error between ``x_t`` and the warped reference."""
    if x_t.shape != x_ref.shape:
        raise ValueError(f"frame shapes differ: {tuple(x_t.shape)} vs {tuple(x_ref.shape)}")
    return torch.mean((x_t - bilinear_warp(x_ref, flow)) ** 2)


class MotionEstimator(nn.Module):
    """Coarse-to-fine pyramid flow network.

    Each level refines the upsampled coarser flow from the warped reference,
    the current frame and the flow itself.
    """

    def __init__(self, frame_channels: int = 3, width: int = 32, levels: int = 3):
        super().__init__()
        self.levels = levels
        in_ch = 2 * frame_channels + 2
        self.level_nets = nn.ModuleList()
        for _ in range(levels):
            self.level_nets.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, width, 3, padding=1),
                    nn.LeakyReLU(0.1),
                    nn.Conv2d(width, width, 3, padding=1),
                    nn.LeakyReLU(0.1),
                    nn.Conv2d(width, width, 3, padding=1),
                    nn.LeakyReLU(0.1),
                    nn.Conv2d(width, width, 3, padding=1),
                    nn.LeakyReLU(0.1),
                    nn.Conv2d(width, 2, 3, padding=1),
                )
            )

    def forward(self, x_t: Tensor, x_ref: Tensor) -> Tensor:
        if x_t.shape != x_ref.shape:
            raise ValueError("current and reference frames must share a shape")
        unbatched = x_t.dim() == 3
        if unbatched:
            x_t = x_t.unsqueeze(0)
            x_ref = x_ref.unsqueeze(0)

        curs = [x_t]
        refs = [x_ref]
        for _ in range(self.levels - 1):
            curs.append(F.avg_pool2d(curs[-1], 2))
            refs.append(F.avg_pool2d(refs[-1], 2))

        flow = torch.zeros(
            x_t.shape[0], 2, curs[-1].shape[-2], curs[-1].shape[-1],
            dtype=x_t.dtype, device=x_t.device,
        )
        for level in range(self.levels - 1, -1, -1):
            cur, ref = curs[level], refs[level]
            if flow.shape[-2:] != cur.shape[-2:]:
                # displacement values scale with resolution
                flow = 2.0 * F.interpolate(
                    flow, size=cur.shape[-2:], mode="bilinear", align_corners=False
                )
            warped = bilinear_warp(ref, flow)
            flow = flow + self.level_nets[level](torch.cat([warped, cur, flow], dim=1))
        return flow.squeeze(0) if unbatched else flow


def save_flow(flow: Tensor | np.ndarray, path: str | Path) -> None:
    """Dump a flow field as a raw float32 .npy array of shape (2, H, W)."""
    arr = flow.detach().cpu().numpy() if isinstance(flow, Tensor) else np.asarray(flow)
    np.save(str(path), arr.astype(np.float32))


def flow_to_color(flow: Tensor | np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Color-wheel rendering of a flow field, as H x W x 3 uint8.

    Hue encodes direction, saturation encodes magnitude relative to
    ``max_magnitude`` (defaults to the field's own maximum).
    """
    from matplotlib.colors import hsv_to_rgb

    arr = flow.detach().cpu().numpy() if isinstance(flow, Tensor) else np.asarray(flow)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"expected flow of shape (2, H, W), got {arr.shape}")
    dx, dy = arr[0], arr[1]
    mag = np.sqrt(dx * dx + dy * dy)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    scale = max(max_magnitude, 1e-8)
    hsv = np.stack(
        [
            (np.arctan2(dy, dx) / (2 * np.pi)) % 1.0,
            np.clip(mag / scale, 0.0, 1.0),
            np.ones_like(mag),
        ],
        axis=-1,
    )
    return (hsv_to_rgb(hsv) * 255.0).astype(np.uint8)
