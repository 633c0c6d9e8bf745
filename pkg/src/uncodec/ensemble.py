"""Shared-backbone ensemble decoders and mixture statistics.

A decoder runs one synthesis backbone over the quantized latent, then maps
the shared feature through ``h`` lightweight branches (two convolutions with
one leaky ReLU in between). Member spread encodes predictive uncertainty via
an equally weighted Gaussian mixture with per-member unit variance.
"""

from __future__ import annotations

import dataclasses

import torch
from torch import Tensor, nn

PREDICTION_KINDS = ("mv", "residual", "reconstruction")


@dataclasses.dataclass
class EnsemblePrediction:
    """Stack of ``h`` same-shaped dense predictions, member dim first."""

    members: Tensor
    kind: str = "mv"

    def __post_init__(self):
        if self.kind not in PREDICTION_KINDS:
            raise ValueError(f"kind must be one of {PREDICTION_KINDS}")
        if self.members.dim() < 2 or self.members.shape[0] < 1:
            raise ValueError("members must stack h >= 1 predictions")

    @property
    def h(self) -> int:
        return self.members.shape[0]


def _members_of(pred: EnsemblePrediction | Tensor) -> Tensor:
    return pred.members if isinstance(pred, EnsemblePrediction) else pred


def mixture_mean(pred: EnsemblePrediction | Tensor) -> Tensor:
    """Elementwise average of the ensemble members."""
    return _members_of(pred).mean(dim=0)


def mixture_variance(pred: EnsemblePrediction | Tensor, member_variance: float | Tensor = 1.0) -> Tensor:
    """Per-component variance of the equally weighted Gaussian mixture.

    ``member_variance`` is the variance attached to each member; the mixture
    variance is the spread of the member means plus that floor. Computed in
    centered form so identical members give exactly the floor.
    """
    members = _members_of(pred)
    mu = members.mean(dim=0, keepdim=True)
    spread = ((members - mu) ** 2).mean(dim=0)
    if isinstance(member_variance, Tensor) and member_variance.dim() == members.dim():
        # per-member variances, stacked like the members: mixture averages them
        member_variance = member_variance.mean(dim=0)
    return spread + member_variance


class EnsembleDecoder(nn.Module):
    """Synthesis transform: shared backbone, ``h`` parallel branches.

    The backbone upsamples the latent back to full resolution (x16) and is
    evaluated exactly once per call; ``backbone_calls`` counts evaluations.
    """

    def __init__(
        self,
        latent_channels: int,
        out_channels: int,
        h: int,
        kind: str,
        backbone_channels: int = 64,
        branch_channels: int = 32,
    ):
        super().__init__()
        if h < 1:
            raise ValueError("need at least one ensemble member")
        if kind not in PREDICTION_KINDS:
            raise ValueError(f"kind must be one of {PREDICTION_KINDS}")
        self.kind = kind
        self.h = h
        # widths mirror the analysis transform: wide near the latent, where
        # compute is cheap, narrowing to backbone_channels at full resolution
        w3, w2, w1 = 256, 96, 64
        self.backbone = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, w3, 3, stride=2, padding=1, output_padding=1),
            nn.LeakyReLU(0.1),
            nn.ConvTranspose2d(w3, w2, 3, stride=2, padding=1, output_padding=1),
            nn.LeakyReLU(0.1),
            nn.ConvTranspose2d(w2, w1, 3, stride=2, padding=1, output_padding=1),
            nn.LeakyReLU(0.1),
            nn.ConvTranspose2d(w1, backbone_channels, 3, stride=2, padding=1, output_padding=1),
            nn.LeakyReLU(0.1),
        )
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(backbone_channels, branch_channels, 3, padding=1),
                nn.LeakyReLU(0.1),
                nn.Conv2d(branch_channels, out_channels, 3, padding=1),
            )
            for _ in range(h)
        )
        self.backbone_calls = 0

    def forward(self, code: Tensor) -> EnsemblePrediction:
        unbatched = code.dim() == 3
        x = code.unsqueeze(0) if unbatched else code
        feature = self.backbone(x)
        self.backbone_calls += 1
        members = torch.stack([branch(feature) for branch in self.branches])
        if unbatched:
            members = members.squeeze(1)
        return EnsemblePrediction(members, kind=self.kind)

    def branch_parameter_count(self) -> int:
        """Parameters added by one extra member."""
        return sum(p.numel() for p in self.branches[0].parameters())
