"""Frame/sequence I/O, GoP structuring and the synthetic moving-shapes corpus.

Frames are float arrays in [0, 1] backed by lossless 8-bit image files.
All sampling helpers take explicit seeds so data order is reproducible.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".bmp", ".ppm", ".pgm")


@dataclasses.dataclass
class Frame:
    """Single image: H x W x C float32 array with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"frame must be HxWxC with C in (1, 3), got {self.data.shape}")
        if self.data.shape[0] < 8 or self.data.shape[1] < 8:
            raise ValueError(f"frame sides must be >= 8, got {self.data.shape[:2]}")
        if not np.isfinite(self.data).all():
            raise ValueError("frame contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclasses.dataclass
class VideoSequence:
    """Ordered list of same-shaped frames."""

    frames: list[Frame]
    name: str = "sequence"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a video sequence needs at least 2 frames")
        shape = self.frames[0].data.shape
        for i, f in enumerate(self.frames):
            if f.data.shape != shape:
                raise ValueError(
                    f"inhomogeneous frame shapes: frame 0 is {shape}, frame {i} is {f.data.shape}"
                )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def channels(self) -> int:
        return self.frames[0].channels


@dataclasses.dataclass
class GopStructure:
    """Partition of frame indices into groups of one I-frame plus P-frames."""

    gop_size: int
    groups: list[tuple[int, list[int]]]

    def all_indices(self) -> list[int]:
        out = []
        for i_idx, p_idxs in self.groups:
            out.append(i_idx)
            out.extend(p_idxs)
        return out


def load_frame(path: str | Path) -> Frame:
    """Load one lossless 8-bit image, normalized by /255."""
    with Image.open(path) as img:
        if img.mode in ("L", "I;16"):
            img = img.convert("L")
        else:
            img = img.convert("RGB")
        data = np.asarray(img, dtype=np.float32) / 255.0
    return Frame(data)


def save_frame(frame: Frame, path: str | Path) -> int:
    """Write a frame as an 8-bit PNG-style file. Returns the byte size on disk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame_to_uint8(frame)).save(path)
    return path.stat().st_size


def frame_to_uint8(frame: Frame) -> np.ndarray:
    arr = np.clip(np.rint(frame.data * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return arr


def load_sequence(path: str | Path, max_frames: int | None = None) -> VideoSequence:
    """Load a directory of numbered image files into a sequence.

    Files are taken in lexical order; all images must share one size.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"no such frame directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if max_frames is not None:
        files = files[:max_frames]
    if len(files) < 2:
        raise ValueError(f"{path} holds {len(files)} frames; need at least 2")
    frames = [load_frame(p) for p in files]
    return VideoSequence(frames, name=path.name)


def save_sequence(seq: VideoSequence, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        save_frame(frame, directory / f"{i:05d}.png")


def make_gop(seq: VideoSequence | int, gop_size: int) -> GopStructure:
    """Split frame indices into groups of at most ``gop_size`` frames.

    The first frame of each group is the I-frame; the rest are P-frames.
    """
    if gop_size < 1:
        raise ValueError(f"gop_size must be >= 1, got {gop_size}")
    n = seq if isinstance(seq, int) else len(seq)
    groups = []
    for start in range(0, n, gop_size):
        end = min(start + gop_size, n)
        groups.append((start, list(range(start + 1, end))))
    return GopStructure(gop_size=gop_size, groups=groups)


def random_crop_pair(seq: VideoSequence, size: int, rng_seed: int) -> tuple[Frame, Frame]:
    """Co-located random crops from two successive frames.

    The pair index and the crop offset are both drawn from ``rng_seed``, so
    the same seed always yields the same pair of crops.
    """
    if size > min(seq.height, seq.width):
        raise ValueError(f"crop size {size} exceeds frame size {seq.height}x{seq.width}")
    rng = np.random.default_rng(rng_seed)
    t = int(rng.integers(0, len(seq) - 1))
    row = int(rng.integers(0, seq.height - size + 1))
    col = int(rng.integers(0, seq.width - size + 1))
    a = seq.frames[t].data[row : row + size, col : col + size]
    b = seq.frames[t + 1].data[row : row + size, col : col + size]
    return Frame(a.copy()), Frame(b.copy())


def to_tensor(frame: Frame | np.ndarray) -> torch.Tensor:
    """Frame (H, W, C) -> float32 tensor (C, H, W)."""
    data = frame.data if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1))).float()


def from_tensor(t: torch.Tensor) -> Frame:
    """Float tensor (C, H, W) -> Frame, values clamped to [0, 1]."""
    arr = t.detach().cpu().clamp(0.0, 1.0).numpy().transpose(1, 2, 0)
    return Frame(arr)


# ---------------------------------------------------------------------------
# Synthetic moving-shapes corpus
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ShapeTrack:
    """One rigid rectangle: start position, size and per-frame velocity (pixels)."""

    top: int
    left: int
    height: int
    width: int
    vy: int
    vx: int

    def rect_at(self, t: int) -> tuple[int, int, int, int]:
        """(top, left, height, width) of the shape at frame ``t``."""
        return self.top + t * self.vy, self.left + t * self.vx, self.height, self.width


def _smooth_texture(rng: np.random.Generator, height: int, width: int, channels: int,
                    cell: int = 4) -> np.ndarray:
    """Blocky random texture with enough structure for motion to be learnable."""
    coarse = rng.random((max(1, height // cell) + 1, max(1, width // cell) + 1, channels))
    tex = np.kron(coarse, np.ones((cell, cell, 1)))[:height, :width]
    tex = 0.15 + 0.7 * tex + 0.1 * rng.random((height, width, channels))
    return np.clip(tex, 0.0, 1.0)


def moving_shapes_clip(
    n_frames: int = 10,
    height: int = 64,
    width: int = 64,
    n_shapes: int = 3,
    seed: int = 0,
    channels: int = 3,
    max_speed: int = 2,
) -> tuple[VideoSequence, list[ShapeTrack]]:
    """Generate a clip of textured rectangles translating over a static background.

    Velocities are integer pixels per frame and chosen so every shape stays
    inside the frame for the whole clip. Values are quantized to the 8-bit
    grid so a save/load round trip is exact.
    """
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    rng = np.random.default_rng(seed)
    background = _smooth_texture(rng, height, width, channels)

    tracks: list[ShapeTrack] = []
    for _ in range(n_shapes):
        sh = int(rng.integers(height // 6, height // 3 + 1))
        sw = int(rng.integers(width // 6, width // 3 + 1))
        speeds = [v for v in range(-max_speed, max_speed + 1) if v != 0]
        vy = int(rng.choice(speeds + [0]))
        vx = int(rng.choice(speeds)) if vy == 0 else int(rng.choice(speeds + [0]))
        travel_y = vy * (n_frames - 1)
        travel_x = vx * (n_frames - 1)
        lo_y, hi_y = max(0, -travel_y), height - sh - max(0, travel_y)
        lo_x, hi_x = max(0, -travel_x), width - sw - max(0, travel_x)
        if hi_y < lo_y or hi_x < lo_x:
            # clip too short/fast for this size; fall back to a slow mover
            vy, vx = 0, 1
            lo_y, hi_y = 0, height - sh
            lo_x, hi_x = 0, width - sw - (n_frames - 1)
        top = int(rng.integers(lo_y, hi_y + 1))
        left = int(rng.integers(lo_x, hi_x + 1))
        tracks.append(ShapeTrack(top, left, sh, sw, vy, vx))

    textures = [_smooth_texture(rng, tr.height, tr.width, channels, cell=3) for tr in tracks]

    frames = []
    for t in range(n_frames):
        canvas = background.copy()
        for tr, tex in zip(tracks, textures):
            top, left, sh, sw = tr.rect_at(t)
            canvas[top : top + sh, left : left + sw] = tex
        canvas = np.rint(canvas * 255.0) / 255.0
        frames.append(Frame(canvas.astype(np.float32)))
    return VideoSequence(frames, name=f"shapes_seed{seed}"), tracks


def write_moving_shapes_corpus(
    out_dir: str | Path,
    n_clips: int,
    n_frames: int = 10,
    height: int = 64,
    width: int = 64,
    n_shapes: int = 3,
    seed: int = 0,
) -> list[Path]:
    """Write ``n_clips`` synthetic clips as clip_XXX/%05d.png under ``out_dir``."""
    out_dir = Path(out_dir)
    paths = []
    for i in range(n_clips):
        seq, _ = moving_shapes_clip(
            n_frames=n_frames, height=height, width=width, n_shapes=n_shapes, seed=seed + i
        )
        clip_dir = out_dir / f"clip_{i:03d}"
        save_sequence(seq, clip_dir)
        paths.append(clip_dir)
    return paths
