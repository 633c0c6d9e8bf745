"""Full P-frame codec and closed-loop sequence coding.

Dataflow per P-frame: estimate motion against the previous reconstruction,
transform-code the flow, decode an ensemble of flows, warp the reference
once per member, refine the warped predictions, code the residual against
the mixture-mean prediction, decode an ensemble of residuals, and refine the
member reconstructions into the final frame.

The decoder-side half is shared verbatim between ``forward`` and
``decode_pframe`` so encoder and decoder reconstructions are bit-identical;
the encoder always buffers its own decode output as the next reference.
"""

from __future__ import annotations

import dataclasses
import io
import struct
import zlib
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor, nn

from .coding import (
    Bitstream,
    BitstreamError,
    FactorizedEntropyModel,
    LatentEncoder,
    clamp_to_support,
    entropy_decode,
    entropy_encode,
    estimate_bits,
    quantize_infer,
    quantize_train,
)
from .config import Config
from .ensemble import EnsembleDecoder, EnsemblePrediction, mixture_mean
from .frames import Frame, GopStructure, VideoSequence, frame_to_uint8, to_tensor
from .motion import MotionEstimator, bilinear_warp

MAGIC_SEQ = b"UNCV"
SEQ_VERSION = 1
_SEQ_HEADER = ">4sBIHIHHB"
_SEQ_HEADER_SIZE = struct.calcsize(_SEQ_HEADER)
_SPATIAL_FACTOR = 16


@dataclasses.dataclass
class CodecConfig:
    """Architecture hyperparameters; echoed into checkpoints and model ids."""

    frame_channels: int = 3
    h: int = 4
    latent_channels_mv: int = 64
    latent_channels_res: int = 96
    backbone_channels: int = 64
    branch_channels: int = 32
    refine_channels: int = 48
    motion_channels: int = 32
    motion_levels: int = 3
    tail_mass: float = 1e-9

    @classmethod
    def from_config(cls, cfg: Config) -> "CodecConfig":
        return cls(
            frame_channels=cfg["codec.frame_channels"],
            h=cfg["codec.h"],
            latent_channels_mv=cfg["codec.latent_channels_mv"],
            latent_channels_res=cfg["codec.latent_channels_res"],
            backbone_channels=cfg["codec.backbone_channels"],
            branch_channels=cfg["codec.branch_channels"],
            refine_channels=cfg["codec.refine_channels"],
            motion_channels=cfg["codec.motion_channels"],
            motion_levels=cfg["codec.motion_levels"],
            tail_mass=cfg["codec.tail_mass"],
        )

    def echo(self) -> str:
        fields = dataclasses.asdict(self)
        return "\n".join(f"{k}={fields[k]!r}" for k in sorted(fields)) + "\n"


@dataclasses.dataclass
class PFrameResult:
    """Everything one P-frame pass produces."""

    reconstruction: Tensor
    bits_mv: Tensor
    bits_res: Tensor
    mv_ensemble: EnsemblePrediction
    res_ensemble: EnsemblePrediction
    refined_mc: EnsemblePrediction
    flow: Tensor
    mv_code: Tensor
    res_code: Tensor


class PredictionRefineNet(nn.Module):
    """Maps the h warped frames plus the reference to h refined predictions.

    Operates on channel-grouped members with a global skip: refined member =
    warped member + learned correction. The final convolution is zero-
    initialized so an untrained net is an exact passthrough.
    """

    def __init__(self, frame_channels: int, h: int, width: int = 48):
        super().__init__()
        c = frame_channels
        self.h = h
        self.net = nn.Sequential(
            nn.Conv2d((h + 1) * c, width, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, h * c, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, warps: Tensor, ref: Tensor) -> Tensor:
        h, b, c, height, width = warps.shape
        stacked = warps.transpose(0, 1).reshape(b, h * c, height, width)
        correction = self.net(torch.cat([stacked, ref], dim=1))
        correction = correction.reshape(b, h, c, height, width).transpose(0, 1)
        return warps + correction


class ReconstructionRefineNet(nn.Module):
    """Fuses h member reconstructions and h refined predictions into one frame.

    Global skip anchored at the mixture mean of the member reconstructions;
    the final convolution is zero-initialized.
    """

    def __init__(self, frame_channels: int, h: int, width: int = 48):
        super().__init__()
        c = frame_channels
        self.net = nn.Sequential(
            nn.Conv2d(2 * h * c, width, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, c, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, recons: Tensor, refined: Tensor) -> Tensor:
        h, b, c, height, width = recons.shape
        x = torch.cat(
            [
                recons.transpose(0, 1).reshape(b, h * c, height, width),
                refined.transpose(0, 1).reshape(b, h * c, height, width),
            ],
            dim=1,
        )
        return recons.mean(dim=0) + self.net(x)


class CodecModel(nn.Module):
    """The assembled inter-frame codec."""

    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        cc = self.config
        self.motion = MotionEstimator(cc.frame_channels, cc.motion_channels, cc.motion_levels)
        self.mv_encoder = LatentEncoder(2, cc.latent_channels_mv)
        self.mv_decoder = EnsembleDecoder(
            cc.latent_channels_mv, 2, cc.h, "mv", cc.backbone_channels, cc.branch_channels
        )
        self.mv_entropy = FactorizedEntropyModel(cc.latent_channels_mv, cc.tail_mass)
        self.res_encoder = LatentEncoder(cc.frame_channels, cc.latent_channels_res)
        self.res_decoder = EnsembleDecoder(
            cc.latent_channels_res, cc.frame_channels, cc.h, "residual",
            cc.backbone_channels, cc.branch_channels,
        )
        self.res_entropy = FactorizedEntropyModel(cc.latent_channels_res, cc.tail_mass)
        self.pred_refine = PredictionRefineNet(cc.frame_channels, cc.h, cc.refine_channels)
        self.recon_refine = ReconstructionRefineNet(cc.frame_channels, cc.h, cc.refine_channels)
        self.register_buffer("steps_trained", torch.zeros((), dtype=torch.long))
        self.forward_calls = 0

    # -- decoder-side halves (shared by forward and decode_pframe) ---------

    def _mv_decode(self, a_hat: Tensor, x_ref: Tensor) -> tuple[EnsemblePrediction, EnsemblePrediction]:
        mv_pred = self.mv_decoder(a_hat)
        h = mv_pred.h
        b, c, height, width = x_ref.shape
        flows = mv_pred.members.reshape(h * b, 2, height, width)
        refs = x_ref.unsqueeze(0).expand(h, b, c, height, width).reshape(h * b, c, height, width)
        warps = bilinear_warp(refs, flows).reshape(h, b, c, height, width)
        refined = self.pred_refine(warps, x_ref)
        return mv_pred, EnsemblePrediction(refined, kind="reconstruction")

    def _res_decode(
        self, b_hat: Tensor, refined: EnsemblePrediction
    ) -> tuple[EnsemblePrediction, Tensor, Tensor]:
        res_pred = self.res_decoder(b_hat)
        recons = refined.members + res_pred.members
        x_hat = self.recon_refine(recons, refined.members)
        return res_pred, recons, x_hat

    def _check_frame(self, x: Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.config.frame_channels:
            raise ValueError(
                f"expected (B, {self.config.frame_channels}, H, W) frames, got {tuple(x.shape)}"
            )
        if x.shape[-2] % _SPATIAL_FACTOR or x.shape[-1] % _SPATIAL_FACTOR:
            raise ValueError(
                f"frame sides must be multiples of {_SPATIAL_FACTOR}; pad first (got {tuple(x.shape[-2:])})"
            )

    def forward(
        self,
        x_t: Tensor,
        x_ref: Tensor,
        mode: str = "train",
        generator: torch.Generator | None = None,
        support_clamp: bool = False,
    ) -> PFrameResult:
        if mode not in ("train", "infer"):
            raise ValueError("mode must be 'train' or 'infer'")
        if x_t.shape != x_ref.shape:
            raise ValueError("current and reference frames must share a shape")
        self._check_frame(x_t)
        self.forward_calls += 1
        if mode == "infer":
            with torch.no_grad():
                return self._run(x_t, x_ref, mode, generator, support_clamp)
        return self._run(x_t, x_ref, mode, generator, support_clamp)

    def _run(self, x_t, x_ref, mode, generator, support_clamp):
        flow = self.motion(x_t, x_ref)
        a = self.mv_encoder(flow)
        if mode == "train":
            a_hat = quantize_train(a, generator)
        else:
            a_hat = quantize_infer(a)
            if support_clamp:
                a_hat = clamp_to_support(a_hat, self.mv_entropy)
        bits_mv = estimate_bits(a_hat, self.mv_entropy)
        mv_pred, refined = self._mv_decode(a_hat, x_ref)

        residual = x_t - mixture_mean(refined)
        b = self.res_encoder(residual)
        if mode == "train":
            b_hat = quantize_train(b, generator)
        else:
            b_hat = quantize_infer(b)
            if support_clamp:
                b_hat = clamp_to_support(b_hat, self.res_entropy)
        bits_res = estimate_bits(b_hat, self.res_entropy)
        res_pred, _, x_hat = self._res_decode(b_hat, refined)
        if mode == "infer":
            x_hat = x_hat.clamp(0.0, 1.0)
        if not torch.isfinite(x_hat).all():
            raise FloatingPointError("non-finite activations in codec forward pass")
        return PFrameResult(
            reconstruction=x_hat,
            bits_mv=bits_mv,
            bits_res=bits_res,
            mv_ensemble=mv_pred,
            res_ensemble=res_pred,
            refined_mc=refined,
            flow=flow,
            mv_code=a_hat,
            res_code=b_hat,
        )

    @torch.no_grad()
    def decode_pframe(self, a_hat: Tensor, b_hat: Tensor, x_ref: Tensor) -> Tensor:
        """Reconstruct one frame from decoded codes; mirrors the encoder bit-exactly."""
        _, refined = self._mv_decode(a_hat, x_ref)
        _, _, x_hat = self._res_decode(b_hat, refined)
        return x_hat.clamp(0.0, 1.0)

    # -- entropy freezing / identity ---------------------------------------

    def freeze_entropy(self) -> None:
        self.mv_entropy.freeze()
        self.res_entropy.freeze()

    @property
    def entropy_frozen(self) -> bool:
        return self.mv_entropy.is_frozen and self.res_entropy.is_frozen

    def model_id(self) -> int:
        """CRC32 over both frozen coding contracts and the architecture echo."""
        if not self.entropy_frozen:
            raise RuntimeError("freeze_entropy() before deriving a model id")
        blob = struct.pack(
            ">II", self.mv_entropy.table_digest(), self.res_entropy.table_digest()
        ) + self.config.echo().encode()
        return zlib.crc32(blob) & 0xFFFFFFFF


def pframe_forward(
    x_t: Frame | Tensor,
    x_ref: Frame | Tensor,
    model: CodecModel,
    mode: str = "train",
    generator: torch.Generator | None = None,
) -> PFrameResult:
    """Single-frame wrapper around ``CodecModel.forward``."""
    xt = to_tensor(x_t) if isinstance(x_t, Frame) else x_t
    xr = to_tensor(x_ref) if isinstance(x_ref, Frame) else x_ref
    result = model(xt.unsqueeze(0), xr.unsqueeze(0), mode=mode, generator=generator)
    return PFrameResult(
        reconstruction=result.reconstruction.squeeze(0),
        bits_mv=result.bits_mv,
        bits_res=result.bits_res,
        mv_ensemble=EnsemblePrediction(result.mv_ensemble.members.squeeze(1), kind="mv"),
        res_ensemble=EnsemblePrediction(result.res_ensemble.members.squeeze(1), kind="residual"),
        refined_mc=EnsemblePrediction(result.refined_mc.members.squeeze(1), kind="reconstruction"),
        flow=result.flow.squeeze(0),
        mv_code=result.mv_code.squeeze(0),
        res_code=result.res_code.squeeze(0),
    )


# ---------------------------------------------------------------------------
# Sequence container
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class FrameRecord:
    kind: str  # "I" | "P"
    i_bytes: bytes | None = None
    mv_stream: Bitstream | None = None
    res_stream: Bitstream | None = None

    def bit_size(self) -> int:
        if self.kind == "I":
            return 8 * (1 + 4 + len(self.i_bytes))
        return 8 * (
            1 + len(self.mv_stream.to_bytes()) + len(self.res_stream.to_bytes())
        )


@dataclasses.dataclass
class SequenceBitstream:
    """Container for one coded sequence: header plus per-frame records."""

    gop_size: int
    height: int
    width: int
    channels: int
    model_id: int
    records: list[FrameRecord]
    encoder_frames: list[np.ndarray] | None = None  # encoder-side reconstructions, not serialized

    def total_bits(self) -> int:
        return 8 * len(self.to_bytes())

    def to_bytes(self) -> bytes:
        out = bytearray(
            struct.pack(
                _SEQ_HEADER,
                MAGIC_SEQ,
                SEQ_VERSION,
                self.model_id,
                self.gop_size,
                len(self.records),
                self.height,
                self.width,
                self.channels,
            )
        )
        for rec in self.records:
            if rec.kind == "I":
                out += struct.pack(">BI", 0, len(rec.i_bytes))
                out += rec.i_bytes
            else:
                out += struct.pack(">B", 1)
                out += rec.mv_stream.to_bytes()
                out += rec.res_stream.to_bytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SequenceBitstream":
        if len(raw) < _SEQ_HEADER_SIZE:
            raise BitstreamError("truncated sequence header at offset 0")
        magic, version, model_id, gop, count, height, width, channels = struct.unpack_from(
            _SEQ_HEADER, raw, 0
        )
        if magic != MAGIC_SEQ:
            raise BitstreamError(f"bad container magic {magic!r} at offset 0")
        if version != SEQ_VERSION:
            raise BitstreamError(f"unsupported container version {version}")
        offset = _SEQ_HEADER_SIZE
        records = []
        for i in range(count):
            if offset >= len(raw):
                raise BitstreamError(f"truncated record {i} at offset {offset}")
            kind = raw[offset]
            offset += 1
            if kind == 0:
                if len(raw) - offset < 4:
                    raise BitstreamError(f"truncated I-frame length at offset {offset}")
                (n,) = struct.unpack_from(">I", raw, offset)
                offset += 4
                if len(raw) - offset < n:
                    raise BitstreamError(f"truncated I-frame payload at offset {offset}")
                records.append(FrameRecord("I", i_bytes=raw[offset : offset + n]))
                offset += n
            elif kind == 1:
                mv, offset = Bitstream.from_bytes(raw, offset)
                res, offset = Bitstream.from_bytes(raw, offset)
                records.append(FrameRecord("P", mv_stream=mv, res_stream=res))
            else:
                raise BitstreamError(f"unknown record type {kind} at offset {offset - 1}")
        return cls(gop, height, width, channels, model_id, list(records))


def _png_bytes(frame: Frame) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(frame_to_uint8(frame)).save(buf, format="PNG")
    return buf.getvalue()


def _png_to_tensor(data: bytes, channels: int) -> Tensor:
    with Image.open(io.BytesIO(data)) as img:
        img = img.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def _pad_frame(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    ph = (-h) % _SPATIAL_FACTOR
    pw = (-w) % _SPATIAL_FACTOR
    if ph == 0 and pw == 0:
        return x
    return F.pad(x.unsqueeze(0), (0, pw, 0, ph), mode="replicate").squeeze(0)


def encode_sequence(
    seq: VideoSequence, gop: GopStructure, model: CodecModel
) -> SequenceBitstream:
    """Code a sequence into a self-contained container.

    I-frames are stored losslessly as 8-bit PNG payloads (their true byte
    cost counts toward the rate); each P-frame is coded against the previous
    reconstruction, closing the loop.
    """
    if not model.entropy_frozen:
        model.freeze_entropy()
    mid = model.model_id()
    records: list[FrameRecord] = []
    enc_frames: list[np.ndarray] = []
    ref: Tensor | None = None
    for i_idx, p_idxs in gop.groups:
        iframe = seq.frames[i_idx]
        png = _png_bytes(iframe)
        records.append(FrameRecord("I", i_bytes=png))
        decoded_i = _png_to_tensor(png, seq.channels)
        enc_frames.append(decoded_i.numpy().transpose(1, 2, 0))
        ref = _pad_frame(decoded_i).unsqueeze(0)
        for p in p_idxs:
            x = _pad_frame(to_tensor(seq.frames[p])).unsqueeze(0)
            result = model(x, ref, mode="infer", support_clamp=True)
            mv_bs = entropy_encode(result.mv_code.squeeze(0), model.mv_entropy, "mv")
            res_bs = entropy_encode(result.res_code.squeeze(0), model.res_entropy, "residual")
            records.append(FrameRecord("P", mv_stream=mv_bs, res_stream=res_bs))
            recon_full = result.reconstruction
            enc_frames.append(
                recon_full[0, :, : seq.height, : seq.width].numpy().transpose(1, 2, 0)
            )
            ref = recon_full
    return SequenceBitstream(
        gop_size=gop.gop_size,
        height=seq.height,
        width=seq.width,
        channels=seq.channels,
        model_id=mid,
        records=records,
        encoder_frames=enc_frames,
    )


def decode_sequence(
    bs: SequenceBitstream | bytes, model: CodecModel, name: str = "decoded"
) -> VideoSequence:
    """Reconstruct every frame of a coded sequence."""
    if isinstance(bs, (bytes, bytearray)):
        bs = SequenceBitstream.from_bytes(bytes(bs))
    if not model.entropy_frozen:
        model.freeze_entropy()
    if bs.model_id != model.model_id():
        raise BitstreamError(
            f"container model_id {bs.model_id:#010x} does not match model {model.model_id():#010x}"
        )
    frames: list[Frame] = []
    ref: Tensor | None = None
    for i, rec in enumerate(bs.records):
        if rec.kind == "I":
            decoded = _png_to_tensor(rec.i_bytes, bs.channels)
            frames.append(Frame(decoded.numpy().transpose(1, 2, 0)))
            ref = _pad_frame(decoded).unsqueeze(0)
        else:
            if ref is None:
                raise BitstreamError(f"P-frame record {i} before any I-frame")
            a_hat = entropy_decode(rec.mv_stream, model.mv_entropy).unsqueeze(0)
            b_hat = entropy_decode(rec.res_stream, model.res_entropy).unsqueeze(0)
            recon_full = model.decode_pframe(a_hat, b_hat, ref)
            frames.append(
                Frame(recon_full[0, :, : bs.height, : bs.width].numpy().transpose(1, 2, 0))
            )
            ref = recon_full
    return VideoSequence(frames, name=name)


# ---------------------------------------------------------------------------
# Checkpoints and model size accounting
# ---------------------------------------------------------------------------

CKPT_WEIGHTS = "model.pt"
CKPT_CONFIG = "config.cfg"


def save_checkpoint(model: CodecModel, directory: str | Path, cfg: Config, step: int) -> Path:
    """Write a self-describing checkpoint directory (weights + config echo)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save({"state": model.state_dict(), "step": int(step)}, directory / CKPT_WEIGHTS)
    (directory / CKPT_CONFIG).write_text(cfg.echo())
    return directory


def load_checkpoint(directory: str | Path) -> tuple[CodecModel, Config, int]:
    directory = Path(directory)
    weights = directory / CKPT_WEIGHTS
    if not weights.is_file():
        raise FileNotFoundError(f"no checkpoint weights at {weights}")
    cfg = Config.from_file(directory / CKPT_CONFIG)
    model = CodecModel(CodecConfig.from_config(cfg))
    payload = torch.load(weights, map_location="cpu", weights_only=True)
    model.load_state_dict(payload["state"])
    return model, cfg, int(payload["step"])


def parameter_report(model: CodecModel) -> dict[str, int]:
    """Per-submodule and total parameter counts."""
    report = {
        name: sum(p.numel() for p in module.parameters())
        for name, module in (
            ("motion", model.motion),
            ("mv_encoder", model.mv_encoder),
            ("mv_decoder", model.mv_decoder),
            ("mv_entropy", model.mv_entropy),
            ("res_encoder", model.res_encoder),
            ("res_decoder", model.res_decoder),
            ("res_entropy", model.res_entropy),
            ("pred_refine", model.pred_refine),
            ("recon_refine", model.recon_refine),
        )
    }
    report["total"] = sum(report.values())
    return report
