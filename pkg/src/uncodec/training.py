"""Two-phase progressive training, ablation sweeps and the directional study.

Phase 1 warms up the inter-coding path (motion estimation, MV transform
coding, MV ensemble decoder, prediction refinement) with the ensemble-aware
motion-compensation loss; phase 2 optimizes everything end-to-end with
rate + lambda * distortion, where distortion combines the ensemble-aware
loss over member reconstructions with the plain MSE of the final frame.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import torch

from .adversarial import FgsmConfig, fgsm_training_step
from .coding import quantize_train
from .config import Config
from .ensemble import mixture_mean
from .frames import VideoSequence, load_sequence, moving_shapes_clip
from .losses import LossReport, ensemble_aware_loss
from .pipeline import CodecConfig, CodecModel, save_checkpoint


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the offending step and components."""


@dataclasses.dataclass
class TrainResult:
    model: CodecModel
    metrics: list[dict]
    checkpoints: list[Path]


class ClipDataset:
    """In-memory corpus of clips with seeded, order-deterministic sampling.

    The sample drawn for (step, slot) depends only on the dataset seed, so
    any prefetching or batching strategy sees the same stream.
    """

    def __init__(self, clips: list[VideoSequence], crop: int, seed: int = 0):
        if not clips:
            raise ValueError("empty corpus")
        self.crop = crop
        self.seed = seed
        self._arrays = [np.stack([f.data for f in clip.frames]) for clip in clips]
        for arr in self._arrays:
            if arr.shape[1] < crop or arr.shape[2] < crop:
                raise ValueError(f"crop {crop} larger than clip frames {arr.shape[1:3]}")

    def __len__(self) -> int:
        return len(self._arrays)

    def sample_pair(self, step: int, slot: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, step, slot])
        arr = self._arrays[int(rng.integers(len(self._arrays)))]
        t = int(rng.integers(arr.shape[0] - 1))
        r = int(rng.integers(arr.shape[1] - self.crop + 1))
        c = int(rng.integers(arr.shape[2] - self.crop + 1))
        ref = arr[t, r : r + self.crop, c : c + self.crop]
        cur = arr[t + 1, r : r + self.crop, c : c + self.crop]
        return ref, cur

    def batch(self, step: int, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        refs, curs = zip(*(self.sample_pair(step, i) for i in range(batch_size)))
        x_ref = torch.from_numpy(np.stack(refs).transpose(0, 3, 1, 2).copy())
        x_t = torch.from_numpy(np.stack(curs).transpose(0, 3, 1, 2).copy())
        return x_ref, x_t


def synthetic_corpus(cfg: Config) -> tuple[list[VideoSequence], list[VideoSequence]]:
    """Deterministic moving-shapes corpus: (training clips, held-out clips)."""
    n_train = cfg["data.synthetic_clips"]
    n_hold = cfg["data.holdout_clips"]
    clips = [
        moving_shapes_clip(
            n_frames=cfg["data.clip_frames"],
            height=cfg["data.size"],
            width=cfg["data.size"],
            seed=cfg["data.seed"] * 1_000_003 + i,
            channels=cfg["codec.frame_channels"],
        )[0]
        for i in range(n_train + n_hold)
    ]
    return clips[:n_train], clips[n_train:]


def load_corpus(cfg: Config) -> tuple[list[VideoSequence], list[VideoSequence]]:
    """Corpus from data.path (clip subdirectories or one frame directory)."""
    path = Path(cfg["data.path"])
    subdirs = sorted(p for p in path.iterdir() if p.is_dir())
    if subdirs:
        clips = [load_sequence(p, cfg["data.max_frames"]) for p in subdirs]
    else:
        clips = [load_sequence(path, cfg["data.max_frames"])]
    n_hold = min(cfg["data.holdout_clips"], max(0, len(clips) - 1))
    split = len(clips) - n_hold
    return clips[:split], clips[split:]


def build_datasets(cfg: Config) -> tuple[ClipDataset, list[VideoSequence]]:
    if cfg["data.path"]:
        train_clips, heldout = load_corpus(cfg)
    else:
        train_clips, heldout = synthetic_corpus(cfg)
    return ClipDataset(train_clips, cfg["data.crop"], cfg["data.seed"]), heldout


def _phase1_loss(cfg: Config):
    k = cfg["loss.k"]
    clip_mode = cfg["loss.clip_mode"]

    def loss_fn(model: CodecModel, x_ref, x_in, x_tgt, generator) -> LossReport:
        flow = model.motion(x_in, x_ref)
        a_hat = quantize_train(model.mv_encoder(flow), generator)
        _, refined = model._mv_decode(a_hat, x_ref)
        total = ensemble_aware_loss(x_tgt, refined.members, k, clip_mode)
        mc_mse = torch.mean((mixture_mean(refined) - x_tgt) ** 2)
        per_member = [float(((m - x_tgt) ** 2).mean().detach()) for m in refined.members]
        return LossReport(total, 0.0, 0.0, mc_mse, per_member)

    return loss_fn


def _phase2_loss(cfg: Config):
    k = cfg["loss.k"]
    clip_mode = cfg["loss.clip_mode"]
    lam = cfg["loss.lambda"]

    def loss_fn(model: CodecModel, x_ref, x_in, x_tgt, generator) -> LossReport:
        result = model(x_in, x_ref, mode="train", generator=generator)
        npix = x_in.shape[0] * x_in.shape[-2] * x_in.shape[-1]
        bpp_mv = result.bits_mv / npix
        bpp_res = result.bits_res / npix
        members = result.refined_mc.members + result.res_ensemble.members
        ea = ensemble_aware_loss(x_tgt, members, k, clip_mode)
        final_mse = torch.mean((result.reconstruction - x_tgt) ** 2)
        total = bpp_mv + bpp_res + lam * (ea + final_mse)
        per_member = [float(((m - x_tgt) ** 2).mean().detach()) for m in members]
        return LossReport(total, bpp_mv, bpp_res, final_mse, per_member)

    return loss_fn


def _residual_path_params(model: CodecModel) -> list[torch.nn.Parameter]:
    mods = [model.res_encoder, model.res_decoder, model.res_entropy, model.recon_refine]
    return [p for m in mods for p in m.parameters()]


def train(
    cfg: Config,
    dataset: ClipDataset | None = None,
    out_dir: str | Path | None = None,
    quiet: bool = True,
) -> TrainResult:
    """Run the progressive schedule; returns the model and the metrics log.

    Fully reproducible given the config seeds: model init, quantization
    noise and sample order are all derived from them.
    """
    if dataset is None:
        dataset, _ = build_datasets(cfg)
    warmup = cfg["train.warmup_steps"]
    total_steps = cfg["train.total_steps"]
    if warmup > total_steps:
        raise ValueError("train.warmup_steps must be <= train.total_steps")

    torch.manual_seed(cfg["seed"])
    model = CodecModel(CodecConfig.from_config(cfg))
    generator = torch.Generator().manual_seed(cfg["seed"] + 1)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg["train.lr_initial"], weight_decay=cfg["train.weight_decay"]
    )
    fgsm_cfg = FgsmConfig(
        epsilon=cfg["fgsm.epsilon"], enabled=cfg["fgsm.enabled"], scope=cfg["fgsm.scope"]
    )
    phase1 = _phase1_loss(cfg)
    phase2 = _phase2_loss(cfg)

    res_snapshot = None
    if warmup > 0:
        res_snapshot = [p.detach().clone() for p in _residual_path_params(model)]

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics: list[dict] = []
    checkpoints: list[Path] = []
    start = time.time()
    for step in range(total_steps):
        lr = cfg["train.lr_initial"] if step < cfg["train.lr_decay_step"] else cfg["train.lr_decayed"]
        for group in optimizer.param_groups:
            group["lr"] = lr

        x_ref, x_t = dataset.batch(step, cfg["train.batch"])
        if step < warmup:
            report = phase1(model, x_ref, x_t, x_t, generator)
        else:
            if step == warmup and res_snapshot is not None:
                for p, snap in zip(_residual_path_params(model), res_snapshot):
                    if not torch.equal(p.detach(), snap):
                        raise AssertionError("residual-path parameters moved during warm-up")
                res_snapshot = None
            report = fgsm_training_step(x_ref, x_t, model, phase2, fgsm_cfg, generator)

        loss = report.total
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: total={float(loss.detach())!r} "
                f"rate_mv={float(torch.as_tensor(report.rate_mv_bpp).detach())!r} "
                f"rate_res={float(torch.as_tensor(report.rate_res_bpp).detach())!r}"
            )
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg["train.grad_clip"])
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)
        model.steps_trained += 1

        if step % cfg["train.log_every"] == 0 or step == total_steps - 1:
            mse = float(torch.as_tensor(report.distortion_mse).detach())
            row = {
                "step": step,
                "loss": float(loss.detach()),
                "bpp_mv": float(torch.as_tensor(report.rate_mv_bpp).detach()),
                "bpp_res": float(torch.as_tensor(report.rate_res_bpp).detach()),
                "psnr": 100.0 if mse < 1e-10 else 10.0 * np.log10(1.0 / mse),
            }
            metrics.append(row)
            if not quiet:
                print(
                    f"step {step:6d}  loss {row['loss']:.4f}  bpp {row['bpp_mv'] + row['bpp_res']:.3f}"
                    f"  psnr {row['psnr']:.2f}  ({time.time() - start:.0f}s)"
                )

        if out_dir is not None and (
            (step + 1) % cfg["train.ckpt_every"] == 0 or step == total_steps - 1
        ):
            ckpt = save_checkpoint(model, out_dir / "ckpt" / f"step_{step + 1:08d}", cfg, step + 1)
            checkpoints.append(ckpt)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "loss", "bpp_mv", "bpp_res", "psnr"])
            writer.writeheader()
            writer.writerows(metrics)
    return TrainResult(model, metrics, checkpoints)


@torch.no_grad()
def evaluate_rd_loss(
    model: CodecModel,
    heldout: list[VideoSequence],
    lam: float,
    crop: int,
    n_pairs: int = 32,
    seed: int = 9000,
    batch: int = 8,
) -> float:
    """Mean rate + lambda * MSE over held-out frame pairs, infer-mode coding."""
    ds = ClipDataset(heldout, crop, seed)
    total = 0.0
    done = 0
    step = 0
    while done < n_pairs:
        b = min(batch, n_pairs - done)
        x_ref, x_t = ds.batch(step, b)
        result = model(x_t, x_ref, mode="infer")
        npix = b * crop * crop
        bpp = float(result.bits_mv + result.bits_res) / npix
        mse = float(torch.mean((result.reconstruction - x_t) ** 2))
        total += (bpp + lam * mse) * b
        done += b
        step += 1
    return total / n_pairs


def ablate(
    cfg: Config,
    h_values: list[int],
    k_values: list[int] | None = None,
    fgsm_values: list[bool] | None = None,
    out_csv: str | Path | None = None,
    quiet: bool = True,
) -> list[dict]:
    """Grid of short trainings; reports held-out RD loss per cell.

    The first cell (lowest h, k=1, no FGSM) anchors the deltas, so its own
    delta is 0.0 by construction.
    """
    fgsm_values = fgsm_values or [False]
    rows: list[dict] = []
    anchor_rd = None
    dataset, heldout = build_datasets(cfg)
    cells = []
    for fg in fgsm_values:
        for h in sorted(h_values):
            for k in k_values or [1]:
                if k <= h:
                    cells.append((h, k, fg))
    for h, k, fg in cells:
        cell_cfg = cfg.copy()
        cell_cfg.set("codec.h", h)
        cell_cfg.set("loss.k", k)
        cell_cfg.set("fgsm.enabled", fg)
        result = train(cell_cfg, dataset=dataset, quiet=quiet)
        rd = evaluate_rd_loss(
            result.model, heldout, cell_cfg["loss.lambda"], cell_cfg["data.crop"]
        )
        if anchor_rd is None:
            anchor_rd = rd
        rows.append(
            {
                "h": h,
                "k": k,
                "fgsm": "on" if fg else "off",
                "rd_loss": rd,
                "delta_pct": 100.0 * (rd - anchor_rd) / anchor_rd,
            }
        )
        if not quiet:
            print(f"h={h} k={k} fgsm={fg}: rd={rd:.4f} delta={rows[-1]['delta_pct']:+.2f}%")
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["h", "k", "fgsm", "rd_loss", "delta_pct"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# Directional study: does the ensemble help at desk scale?
# ---------------------------------------------------------------------------


def cache_root() -> Path:
    return Path(os.environ.get("UNCODEC_CACHE", ".uncodec_cache"))


def directional_protocol(
    steps: int = 20000,
    seeds: tuple[int, ...] = (0, 1, 2),
    batch: int = 2,
    crop: int = 32,
    lam: float = 1024.0,
    h_values: tuple[int, ...] = (1, 4),
) -> dict:
    """The desk-scale h=1 vs h=4 training protocol; batch sized for one CPU core."""
    return {
        "steps": steps,
        "warmup": min(2000, steps // 10),
        "seeds": list(seeds),
        "batch": batch,
        "crop": crop,
        "lambda": lam,
        "h_values": list(h_values),
        "k": 1,
        "corpus": {"clips": 48, "holdout": 6, "frames": 10, "size": 64, "seed": 0},
    }


def _protocol_tag(protocol: dict) -> str:
    canon = json.dumps(protocol, sort_keys=True).encode()
    return hashlib.sha256(canon).hexdigest()[:12]


def _experiment_config(protocol: dict, h: int, seed: int) -> Config:
    cfg = Config()
    cfg.set("codec.h", h)
    cfg.set("loss.k", protocol["k"])
    cfg.set("loss.lambda", protocol["lambda"])
    cfg.set("seed", seed)
    cfg.set("data.seed", protocol["corpus"]["seed"])
    cfg.set("data.crop", protocol["crop"])
    cfg.set("data.synthetic_clips", protocol["corpus"]["clips"])
    cfg.set("data.holdout_clips", protocol["corpus"]["holdout"])
    cfg.set("data.clip_frames", protocol["corpus"]["frames"])
    cfg.set("data.size", protocol["corpus"]["size"])
    cfg.set("train.batch", protocol["batch"])
    cfg.set("train.total_steps", protocol["steps"])
    cfg.set("train.warmup_steps", protocol["warmup"])
    cfg.set("train.lr_decay_step", int(protocol["steps"] * 0.75))
    return cfg


def directional_experiment(
    protocol: dict | None = None,
    cache_dir: str | Path | None = None,
    quiet: bool = True,
) -> dict:
    """Train every (h, seed) cell of the protocol, caching models and RD losses.

    Returns {"protocol": ..., "cells": {"h{h}_seed{s}": {"rd_loss": ...,
    "checkpoint": ...}}}. Cached cells are reused, so interrupted runs resume.
    """
    protocol = protocol or directional_protocol()
    root = Path(cache_dir) if cache_dir is not None else cache_root()
    exp_dir = root / f"directional_{_protocol_tag(protocol)}"
    exp_dir.mkdir(parents=True, exist_ok=True)
    results_path = exp_dir / "results.json"
    cells: dict[str, dict] = {}
    if results_path.is_file():
        cells = json.loads(results_path.read_text()).get("cells", {})

    for h in protocol["h_values"]:
        for seed in protocol["seeds"]:
            key = f"h{h}_seed{seed}"
            ckpt_dir = exp_dir / key
            if key in cells and (ckpt_dir / "model.pt").is_file():
                continue
            cfg = _experiment_config(protocol, h, seed)
            dataset, heldout = build_datasets(cfg)
            t0 = time.time()
            result = train(cfg, dataset=dataset, quiet=quiet)
            rd = evaluate_rd_loss(result.model, heldout, protocol["lambda"], protocol["crop"])
            save_checkpoint(result.model, ckpt_dir, cfg, cfg["train.total_steps"])
            cells[key] = {
                "rd_loss": rd,
                "checkpoint": str(ckpt_dir),
                "train_seconds": round(time.time() - t0, 1),
            }
            payload = {"protocol": protocol, "cells": cells}
            results_path.write_text(json.dumps(payload, indent=2))
            if not quiet:
                print(f"{key}: rd={rd:.4f} ({cells[key]['train_seconds']}s)")

    payload = {"protocol": protocol, "cells": cells}
    results_path.write_text(json.dumps(payload, indent=2))
    return payload
