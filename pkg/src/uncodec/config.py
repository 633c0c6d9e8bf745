"""Flat dotted-key configuration with documented defaults.

Every key the tool accepts is declared here with a default and a help line;
unknown keys are rejected everywhere (files, overrides, checkpoints). The
canonical ``echo`` text is embedded in checkpoints and feeds bitstream
model-id derivation, so its formatting is part of the on-disk contract.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    """Bad key, bad value, or unreadable config file."""


@dataclasses.dataclass(frozen=True)
class KeySpec:
    default: object
    type: type
    help: str


DEFAULTS: dict[str, KeySpec] = {
    "seed": KeySpec(0, int, "master seed for model init and quantization noise"),
    # data
    "data.path": KeySpec("", str, "frame directory or corpus of clip subdirectories; empty = synthetic"),
    "data.crop": KeySpec(64, int, "training crop size in pixels"),
    "data.gop": KeySpec(10, int, "group-of-pictures size for sequence coding"),
    "data.max_frames": KeySpec(100, int, "max frames loaded per sequence"),
    "data.seed": KeySpec(0, int, "seed for dataset sampling order and synthetic generation"),
    "data.synthetic_clips": KeySpec(48, int, "number of synthetic clips when data.path is empty"),
    "data.clip_frames": KeySpec(10, int, "frames per synthetic clip"),
    "data.size": KeySpec(64, int, "synthetic clip frame side length"),
    "data.holdout_clips": KeySpec(6, int, "clips reserved for held-out evaluation"),
    # codec
    "codec.frame_channels": KeySpec(3, int, "image channels (3 RGB or 1 luma)"),
    "codec.h": KeySpec(4, int, "ensemble members per decoder"),
    "codec.latent_channels_mv": KeySpec(64, int, "motion latent channels"),
    "codec.latent_channels_res": KeySpec(96, int, "residual latent channels"),
    "codec.backbone_channels": KeySpec(64, int, "decoder backbone output channels"),
    "codec.branch_channels": KeySpec(32, int, "decoder branch hidden channels"),
    "codec.refine_channels": KeySpec(48, int, "refine net hidden channels"),
    "codec.motion_channels": KeySpec(32, int, "motion net hidden channels"),
    "codec.motion_levels": KeySpec(3, int, "motion pyramid levels"),
    "codec.tail_mass": KeySpec(1e-9, float, "entropy model tail mass / likelihood floor"),
    # loss
    "loss.k": KeySpec(1, int, "rank of the clipping member in the ensemble-aware loss"),
    "loss.clip_mode": KeySpec("route_to_kth", str, "gradient convention: route_to_kth | detach_clipped"),
    "loss.lambda": KeySpec(1024.0, float, "rate-distortion trade-off weight"),
    # fgsm
    "fgsm.enabled": KeySpec(False, bool, "adversarially perturb training frames"),
    "fgsm.epsilon": KeySpec(4.0 / 255.0, float, "sign-gradient perturbation magnitude"),
    "fgsm.scope": KeySpec("both", str, "perturb frame as: both | input_only"),
    # training
    "train.warmup_steps": KeySpec(2000, int, "motion/MV warm-up steps before end-to-end phase"),
    "train.total_steps": KeySpec(20000, int, "total optimization steps"),
    "train.lr_initial": KeySpec(1e-4, float, "learning rate before decay"),
    "train.lr_decayed": KeySpec(1e-5, float, "learning rate from lr_decay_step onward"),
    "train.lr_decay_step": KeySpec(15000, int, "step at which the learning rate drops"),
    "train.batch": KeySpec(8, int, "training batch size"),
    "train.weight_decay": KeySpec(1e-4, float, "decoupled weight decay"),
    "train.grad_clip": KeySpec(1.0, float, "gradient norm clip"),
    "train.log_every": KeySpec(50, int, "steps between metrics rows"),
    "train.ckpt_every": KeySpec(5000, int, "steps between checkpoints"),
    # evaluation
    "eval.bd_fit": KeySpec("cubic", str, "rate-curve fit for BD-rate: cubic | pchip"),
}


def _parse_value(key: str, raw: object, typ: type) -> object:
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expects {typ.__name__})") from exc


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    """Typed view over the flat key space, starting from the defaults."""

    def __init__(self, values: dict[str, object] | None = None):
        self._values = {key: spec.default for key, spec in DEFAULTS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    @classmethod
    def from_file(cls, path: str | Path) -> "Config":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = cls()
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = stripped.partition("=")
            cfg.set(key.strip(), raw.strip())
        return cfg

    def set(self, key: str, value: object) -> None:
        spec = DEFAULTS.get(key)
        if spec is None:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _parse_value(key, value, spec.type)

    def __getitem__(self, key: str) -> object:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def copy(self) -> "Config":
        return Config(dict(self._values))

    def echo(self, prefix: str | None = None) -> str:
        """Canonical sorted key=value text, optionally restricted to a prefix."""
        lines = []
        for key in sorted(self._values):
            if prefix is not None and not key.startswith(prefix):
                continue
            lines.append(f"{key}={_format_value(self._values[key])}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict[str, object]:
        return dict(self._values)


def apply_overrides(cfg: Config, overrides: list[str]) -> None:
    """Apply ``key=value`` strings, as given to ``--set``."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        cfg.set(key.strip(), raw.strip())


def describe_keys() -> str:
    """Help text listing every key, its default and meaning."""
    width = max(len(k) for k in DEFAULTS)
    lines = [
        f"  {key.ljust(width)}  {_format_value(spec.default)!s:>14}  {spec.help}"
        for key, spec in sorted(DEFAULTS.items())
    ]
    return "\n".join(lines)
