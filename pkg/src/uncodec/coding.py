"""Transform coding for motion and residual latents.

Covers both halves of the coding chain: the relaxed/actual quantizers with
their diagnostics, and a learned per-channel factorized entropy model that
backs bit estimation during training and real range-coded bitstreams at
inference. Frozen CDF tables are part of the bitstream contract: encoder and
decoder must derive them from the same model state.
"""

from __future__ import annotations

import dataclasses
import math
import struct
import zlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import rangecoder

MAX_SYMBOL = 1 << 15

MAGIC_CODE = b"UNCC"
CODE_VERSION = 1
_HEADER = ">4sBBHHHII"
_HEADER_SIZE = struct.calcsize(_HEADER)

STREAM_KINDS = ("mv", "residual")


class BitstreamError(ValueError):
    """Raised for corrupt containers or encoder/decoder model mismatches."""


def quantize_train(latent: Tensor, generator: torch.Generator | None = None) -> Tensor:
    """Relaxed quantization: add i.i.d. uniform noise from (-1/2, 1/2).

    The noise is detached, so gradients pass through unchanged.
    """
    noise = torch.rand(
        latent.shape, generator=generator, dtype=latent.dtype, device=latent.device
    ) - 0.5
    # keep the interval strictly open at both ends
    noise = noise.clamp(-0.5 + 2**-20, 0.5 - 2**-20)
    return latent + noise


def quantize_infer(latent: Tensor) -> Tensor:
    """Round to the nearest integer, ties away from zero."""
    if not torch.isfinite(latent).all():
        raise ValueError("cannot quantize non-finite latent")
    rounded = torch.sign(latent) * torch.floor(torch.abs(latent) + 0.5)
    if rounded.abs().max() > MAX_SYMBOL:
        raise ValueError(f"quantized magnitude exceeds bound {MAX_SYMBOL}")
    return rounded


def perturb_quantized(
    latent: Tensor,
    code: Tensor,
    gap_threshold: float = 0.1,
    fraction: float = 0.2,
) -> Tensor:
    """Nudge quantized values toward their unquantized source.

    Positions whose quantization gap ``|latent - code|`` is at least
    ``gap_threshold`` move by ``fraction`` of the signed gap; all others are
    returned unchanged.
    """
    if latent.shape != code.shape:
        raise ValueError("latent and code shapes differ")
    gap = latent - code
    return code + torch.where(gap.abs() >= gap_threshold, fraction * gap, torch.zeros_like(gap))


def linear_noise_bound(weights) -> float:
    """Worst-case effect of half-unit quantization noise on a linear decoder."""
    w = torch.as_tensor(weights, dtype=torch.float64)
    if not torch.isfinite(w).all():
        raise ValueError("weights must be finite")
    return 0.5 * float(w.abs().sum())


class _LowerBound(torch.autograd.Function):
    """clamp_min that still passes gradients pushing the value upward."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad < 0)
        return grad * keep, None


class FactorizedEntropyModel(nn.Module):
    """Learned per-channel density over latent values.

    Each channel gets an independent monotone CDF built from a stack of
    small positive-weight affine layers with gated tanh nonlinearities.
    Integer-bin probabilities come from CDF differences at +-1/2, floored at
    ``tail_mass``. ``freeze`` derives the quantized CDF tables used by the
    range coder.
    """

    def __init__(
        self,
        channels: int,
        tail_mass: float = 1e-9,
        init_scale: float = 10.0,
        filters: tuple[int, ...] = (3, 3, 3, 3),
    ):
        super().__init__()
        if not 0.0 < tail_mass < 1.0:
            raise ValueError("tail_mass must be in (0, 1)")
        self.channels = channels
        self.tail_mass = float(tail_mass)
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self._matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            bias = torch.empty(channels, dims[i + 1], 1)
            nn.init.uniform_(bias, -0.5, 0.5)
            self._biases.append(nn.Parameter(bias))
            if i < len(dims) - 2:
                self._factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
        self._frozen_offsets: np.ndarray | None = None
        self._frozen_cdfs: list[list[int]] | None = None
        self._digest: int | None = None

    def _logits_cdf(self, x: Tensor) -> Tensor:
        # x: (channels, 1, N)
        v = x
        for i, (matrix, bias) in enumerate(zip(self._matrices, self._biases)):
            v = torch.bmm(F.softplus(matrix), v) + bias
            if i < len(self._factors):
                v = v + torch.tanh(self._factors[i]) * torch.tanh(v)
        return v

    @torch.no_grad()
    def _cdf_channel(self, ch: int, points: Tensor) -> Tensor:
        v = points.reshape(1, 1, -1)
        for i, (matrix, bias) in enumerate(zip(self._matrices, self._biases)):
            v = torch.bmm(F.softplus(matrix[ch : ch + 1]), v) + bias[ch : ch + 1]
            if i < len(self._factors):
                v = v + torch.tanh(self._factors[i][ch : ch + 1]) * torch.tanh(v)
        return torch.sigmoid(v).reshape(-1)

    def cdf(self, x: Tensor) -> Tensor:
        """Continuous CDF per channel; ``x`` has shape (channels, N)."""
        return torch.sigmoid(self._logits_cdf(x.unsqueeze(1))).squeeze(1)

    def likelihood(self, values: Tensor) -> Tensor:
        """Integer-bin probability of each element, floored at ``tail_mass``.

        ``values`` is (C, H, W) or (B, C, H, W) with C == ``self.channels``.
        """
        unbatched = values.dim() == 3
        x = values.unsqueeze(0) if unbatched else values
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected channel dim {self.channels}, got {tuple(values.shape)}")
        b, c, h, w = x.shape
        flat = x.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits_cdf(flat - 0.5)
        upper = self._logits_cdf(flat + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = _LowerBound.apply(p, self.tail_mass)
        out = p.reshape(c, b, h, w).permute(1, 0, 2, 3)
        return out.squeeze(0) if unbatched else out

    # -- frozen-table machinery -------------------------------------------

    @torch.no_grad()
    def _cdf_at(self, points: Tensor) -> Tensor:
        return self.cdf(points.reshape(self.channels, 1).float()).reshape(self.channels).double()

    @torch.no_grad()
    def freeze(self, symbol_bound: int = MAX_SYMBOL) -> None:
        """Build per-channel quantized CDF tables for actual entropy coding.

        The integer support per channel is the tightest range whose left-out
        tails each hold at most ``tail_mass / 2`` probability, capped at
        ``+-symbol_bound``.
        """
        tau = self.tail_mass / 2.0
        c = self.channels

        def search(predicate) -> np.ndarray:
            # smallest integer s in [-bound, bound] with predicate(s) true,
            # assuming predicate is monotone non-decreasing in s
            lo = np.full(c, -symbol_bound, dtype=np.int64)
            hi = np.full(c, symbol_bound, dtype=np.int64)
            while np.any(lo < hi):
                mid = (lo + hi) // 2
                hit = predicate(torch.from_numpy(mid.astype(np.float32))).numpy()
                hi = np.where(hit, mid, hi)
                lo = np.where(hit, lo, np.minimum(mid + 1, hi))
            return lo

        # first s whose left tail exceeds tau -> support starts one below
        lo = search(lambda s: self._cdf_at(s - 0.5) > tau) - 1
        # first s whose right tail is within tau -> support ends there
        hi = search(lambda s: self._cdf_at(s + 0.5) >= 1.0 - tau)
        lo = np.clip(lo, -symbol_bound, symbol_bound)
        hi = np.clip(np.maximum(hi, lo), -symbol_bound, symbol_bound)

        offsets = lo
        cdfs: list[list[int]] = []
        for ch in range(c):
            n = int(hi[ch] - lo[ch]) + 1
            if n + 1 > (1 << rangecoder.PRECISION):
                raise RuntimeError(f"channel {ch} support of {n} bins is too wide to code")
            grid = torch.arange(lo[ch], hi[ch] + 1, dtype=torch.float32)
            points = torch.cat([grid - 0.5, grid[-1:] + 0.5])
            vals = self._cdf_channel(ch, points).double().numpy()
            pmf = np.diff(vals)
            # fold the clipped tails into the edge bins
            pmf[0] += vals[0]
            pmf[-1] += 1.0 - vals[-1]
            cdfs.append(rangecoder.pmf_to_quantized_cdf(pmf).tolist())
        self._frozen_offsets = offsets
        self._frozen_cdfs = cdfs
        self._digest = None

    @property
    def is_frozen(self) -> bool:
        return self._frozen_cdfs is not None

    def table_digest(self) -> int:
        """CRC32 over the frozen tables; identifies the coding contract."""
        if not self.is_frozen:
            raise RuntimeError("entropy model has no frozen tables; call freeze() first")
        if self._digest is None:
            blob = bytearray()
            blob += struct.pack(">I", self.channels)
            for off, cdf in zip(self._frozen_offsets, self._frozen_cdfs):
                blob += struct.pack(">iI", int(off), len(cdf))
                blob += np.asarray(cdf, dtype=">u4").tobytes()
            self._digest = zlib.crc32(bytes(blob)) & 0xFFFFFFFF
        return self._digest


def clamp_to_support(code: Tensor, model: FactorizedEntropyModel) -> Tensor:
    """Clamp integer codes into the model's frozen per-channel support.

    Mirrors the clipping the encoder applies when forming range-coder
    symbols, so reconstructions can be computed from exactly what the
    decoder will see.
    """
    if not model.is_frozen:
        raise RuntimeError("freeze() the entropy model before clamping to support")
    lo = torch.as_tensor(model._frozen_offsets, dtype=code.dtype, device=code.device)
    n = torch.as_tensor(
        [len(c) - 1 for c in model._frozen_cdfs], dtype=code.dtype, device=code.device
    )
    shape = (-1, 1, 1) if code.dim() == 3 else (1, -1, 1, 1)
    lo = lo.reshape(shape)
    hi = lo + n.reshape(shape) - 1
    return torch.minimum(torch.maximum(code, lo), hi)


def estimate_bits(code: Tensor, model) -> Tensor:
    """Total information content of ``code`` under the model, in bits.

    Differentiable; works for both noisy training latents and integer codes.
    ``model`` only needs a ``likelihood`` method.
    """
    p = model.likelihood(code)
    if not torch.isfinite(p).all():
        raise ValueError("entropy model produced non-finite likelihoods")
    return -torch.log2(p).sum()


@dataclasses.dataclass
class Bitstream:
    """One range-coded latent stream plus its self-describing header."""

    payload: bytes
    stream_kind: str
    shape: tuple[int, int, int]
    model_id: int

    def to_bytes(self) -> bytes:
        kind = STREAM_KINDS.index(self.stream_kind)
        c, h, w = self.shape
        header = struct.pack(
            _HEADER, MAGIC_CODE, CODE_VERSION, kind, c, h, w, self.model_id, len(self.payload)
        )
        return header + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes, offset: int = 0) -> tuple["Bitstream", int]:
        if len(raw) - offset < _HEADER_SIZE:
            raise BitstreamError(f"truncated stream header at offset {offset}")
        magic, version, kind, c, h, w, model_id, n = struct.unpack_from(_HEADER, raw, offset)
        if magic != MAGIC_CODE:
            raise BitstreamError(f"bad stream magic {magic!r} at offset {offset}")
        if version != CODE_VERSION:
            raise BitstreamError(f"unsupported stream version {version}")
        if kind >= len(STREAM_KINDS):
            raise BitstreamError(f"unknown stream kind {kind}")
        start = offset + _HEADER_SIZE
        if len(raw) - start < n:
            raise BitstreamError(f"truncated stream payload at offset {start}")
        payload = raw[start : start + n]
        return cls(payload, STREAM_KINDS[kind], (c, h, w), model_id), start + n


def entropy_encode(code: Tensor, model: FactorizedEntropyModel, stream_kind: str = "mv") -> Bitstream:
    """Losslessly encode an integer-valued code tensor of shape (C, h, w)."""
    if stream_kind not in STREAM_KINDS:
        raise ValueError(f"stream_kind must be one of {STREAM_KINDS}")
    if not model.is_frozen:
        raise RuntimeError("freeze() the entropy model before encoding")
    if code.dim() != 3 or code.shape[0] != model.channels:
        raise ValueError(f"expected ({model.channels}, h, w) code, got {tuple(code.shape)}")
    arr = code.detach().cpu().numpy()
    ints = np.rint(arr).astype(np.int64)
    if not np.array_equal(ints, arr):
        raise ValueError("code tensor is not integer-valued")

    offsets = model._frozen_offsets
    cdfs = model._frozen_cdfs
    enc = rangecoder.RangeEncoder()
    total = 1 << rangecoder.PRECISION
    for ch in range(model.channels):
        cdf = cdfs[ch]
        n = len(cdf) - 1
        syms = np.clip(ints[ch].ravel() - offsets[ch], 0, n - 1)
        for s in syms:
            enc.encode(cdf[s], cdf[s + 1], total)
    payload = enc.finish() if arr.size else b""
    shape = (int(code.shape[0]), int(code.shape[1]), int(code.shape[2]))
    return Bitstream(payload, stream_kind, shape, model.table_digest())


def entropy_decode(bs: Bitstream, model: FactorizedEntropyModel) -> Tensor:
    """Decode a stream back to the exact integer-valued code tensor."""
    if not model.is_frozen:
        raise RuntimeError("freeze() the entropy model before decoding")
    if bs.model_id != model.table_digest():
        raise BitstreamError(
            f"stream model_id {bs.model_id:#010x} does not match model {model.table_digest():#010x}"
        )
    c, h, w = bs.shape
    if c != model.channels:
        raise BitstreamError(f"stream has {c} channels, model has {model.channels}")
    out = np.empty((c, h, w), dtype=np.int64)
    if out.size:
        dec = rangecoder.RangeDecoder(bs.payload)
        total = 1 << rangecoder.PRECISION
        for ch in range(c):
            cdf = model._frozen_cdfs[ch]
            off = int(model._frozen_offsets[ch])
            plane = np.empty(h * w, dtype=np.int64)
            for i in range(h * w):
                plane[i] = dec.decode(cdf, total) + off
            out[ch] = plane.reshape(h, w)
    return torch.from_numpy(out).float()


class LatentEncoder(nn.Module):
    """Analysis transform: four stride-2 convolutions, /16 spatial.

    Hidden widths grow toward the low-resolution end, where extra capacity
    is nearly free in compute.
    """

    WIDTHS = (64, 96, 256)

    def __init__(self, in_channels: int, latent_channels: int):
        super().__init__()
        w1, w2, w3 = self.WIDTHS
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, w1, 3, stride=2, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(w3, latent_channels, 3, stride=2, padding=1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)
