"""Bouncing-shapes clips, PGM/PPM frame files and clip manifests."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
# seed offsets per split; counts must stay below the stride to keep splits disjoint
SPLIT_SEED_STRIDE = 100_000


class FrameFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    resolution: int = 64
    n_shapes: int = 2
    kinds: tuple = ("square", "disc")
    size_range: tuple = (8, 14)
    speed_range: tuple = (2, 4)
    T_total: int = 20
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        r = self.resolution
        if r < 16 or r & (r - 1):
            raise ValueError("resolution must be a power of two >= 16")
        if not 1 <= self.n_shapes <= 4:
            raise ValueError("n_shapes must be within 1..4")
        if not self.kinds or any(k not in ("square", "disc") for k in self.kinds):
            raise ValueError("kinds must be a nonempty subset of {square, disc}")
        lo, hi = self.size_range
        if lo < 1 or hi < lo:
            raise ValueError("bad size_range")
        if hi > r:
            raise ValueError(f"shape size {hi} larger than frame {r}")
        slo, shi = self.speed_range
        if slo < 1 or shi < slo:
            raise ValueError("speeds must be nonzero: speed_range needs 1 <= lo <= hi")
        if self.T_total < 1:
            raise ValueError("T_total must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["kinds"] = list(self.kinds)
        d["size_range"] = list(self.size_range)
        d["speed_range"] = list(self.speed_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("kinds", "size_range", "speed_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, C, H, W) in [0, 1]
    seed: int = 0
    split: str = "train"
    meta: dict = field(default_factory=dict)


@dataclass
class Shape:
    kind: str
    size: int
    y: float
    x: float
    vy: float
    vx: float
    color: tuple


def _reflect(pos, vel, limit):
    pos = pos + vel
    # elastic bounce off both borders; loops only for speeds exceeding the free range
    while pos < 0 or pos > limit:
        if pos < 0:
            pos, vel = -pos, -vel
        else:
            pos, vel = 2 * limit - pos, -vel
    return pos, vel


def _sample_shapes(cfg: SceneConfig, rng):
    shapes = []
    for _ in range(cfg.n_shapes):
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        limit = cfg.resolution - size
        y = float(rng.integers(0, limit + 1))
        x = float(rng.integers(0, limit + 1))
        speed = lambda: float(rng.integers(cfg.speed_range[0], cfg.speed_range[1] + 1)) * (
            1.0 if rng.random() < 0.5 else -1.0)
        vy, vx = speed(), speed()
        if cfg.channels == 1:
            color = (1.0,)
        else:
            color = tuple(float(c) for c in rng.uniform(0.3, 1.0, size=3))
        shapes.append(Shape(kind, size, y, x, vy, vx, color))
    return shapes


def _render(shapes, cfg: SceneConfig):
    r = cfg.resolution
    frame = np.zeros((cfg.channels, r, r), dtype=np.float32)
    for s in shapes:
        y0, x0 = int(np.floor(s.y)), int(np.floor(s.x))
        if s.kind == "square":
            mask = np.zeros((r, r), dtype=bool)
            mask[y0 : y0 + s.size, x0 : x0 + s.size] = True
        else:
            rad = s.size / 2.0
            yy, xx = np.mgrid[0:r, 0:r]
            mask = (yy + 0.5 - y0 - rad) ** 2 + (xx + 0.5 - x0 - rad) ** 2 <= rad * rad
        for c in range(cfg.channels):
            frame[c][mask] = np.maximum(frame[c][mask], s.color[c])
    return frame


def generate_clip(cfg: SceneConfig, split="train", freeze=False, shapes=None) -> VideoClip:
    """Shapes moving at constant velocity with specular reflection at the borders.

    ``freeze`` keeps every shape in place (test hook); ``shapes`` overrides the
    sampled initial state.
    """
    rng = np.random.default_rng(cfg.seed)
    shapes = _sample_shapes(cfg, rng) if shapes is None else [replace(s) for s in shapes]
    for s in shapes:
        lim = cfg.resolution - s.size
        if s.size > cfg.resolution:
            raise ValueError(f"shape size {s.size} larger than frame {cfg.resolution}")
        if not (0 <= s.y <= lim and 0 <= s.x <= lim):
            raise ValueError("shape must start fully inside the frame")
    frames = np.empty((cfg.T_total, cfg.channels, cfg.resolution, cfg.resolution), dtype=np.float32)
    for t in range(cfg.T_total):
        frames[t] = _render(shapes, cfg)
        if not freeze:
            for s in shapes:
                s.y, s.vy = _reflect(s.y, s.vy, cfg.resolution - s.size)
                s.x, s.vx = _reflect(s.x, s.vx, cfg.resolution - s.size)
    return VideoClip(frames, seed=cfg.seed, split=split, meta={"n_shapes": len(shapes)})


def split_seeds(split: str, count: int, base_seed=0):
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if count >= SPLIT_SEED_STRIDE:
        raise ValueError(f"at most {SPLIT_SEED_STRIDE - 1} clips per split")
    off = base_seed + SPLITS.index(split) * SPLIT_SEED_STRIDE
    return [off + i for i in range(count)]


def make_split(cfg: SceneConfig, split: str, count: int, base_seed=0):
    return [generate_clip(replace(cfg, seed=s), split=split) for s in split_seeds(split, count, base_seed)]


def copy_last_baseline(frames_in: np.ndarray, T_out: int) -> np.ndarray:
    """Repeat the final observed frame ``T_out`` times: (B, T, ...) -> (B, T_out, ...)."""
    if frames_in.shape[1] < 1:
        raise ValueError("need at least one observed frame")
    last = frames_in[:, -1:]
    return np.repeat(last, T_out, axis=1)


# ---------------------------------------------------------------- frame files

def quantize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise FrameFormatError("frame values must lie in [0, 1]")
    return np.round(x.astype(np.float64) * 255.0).astype(np.uint8)


def write_frame(path, frame: np.ndarray):
    """Write one (C, H, W) frame as binary PGM (C=1) or PPM (C=3)."""
    c, h, w = frame.shape
    if c == 1:
        magic, body = b"P5", quantize(frame[0])
    elif c == 3:
        magic, body = b"P6", quantize(frame).transpose(1, 2, 0)
    else:
        raise FrameFormatError(f"unsupported channel count {c}")
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(body).tobytes())


_HEADER = re.compile(rb"^(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_frame(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise FrameFormatError(f"{path}: malformed PGM/PPM header")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FrameFormatError(f"{path}: maxval {maxval} unsupported")
    c = 1 if magic == b"P5" else 3
    body = raw[m.end():]
    if len(body) != w * h * c:
        raise FrameFormatError(f"{path}: expected {w * h * c} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (arr.astype(np.float32) / 255.0)


def write_frames(directory, clip: VideoClip, prefix="frame"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if clip.frames.shape[1] == 1 else "ppm"
    names = []
    for t, frame in enumerate(clip.frames):
        name = f"{prefix}_{t:03d}.{ext}"
        write_frame(d / name, frame)
        names.append(name)
    return names


def read_frames(directory, names=None, seed=0, split="train") -> VideoClip:
    d = Path(directory)
    if names is None:
        names = sorted(p.name for p in d.iterdir() if p.suffix in (".pgm", ".ppm"))
    if not names:
        raise FrameFormatError(f"{d}: no frames")
    frames = np.stack([read_frame(d / n) for n in names])
    return VideoClip(frames, seed=seed, split=split)


# ---------------------------------------------------------------- manifests

MANIFEST_NAME = "manifest.json"


def write_dataset(out_dir, cfg: SceneConfig, counts: dict, base_seed=0):
    """Generate every split, write frames and a manifest; returns the manifest dict."""
    out = Path(out_dir)
    clips = []
    for split in SPLITS:
        for i, seed in enumerate(split_seeds(split, counts.get(split, 0), base_seed)):
            clip = generate_clip(replace(cfg, seed=seed), split=split)
            rel = f"{split}/clip_{i:04d}"
            names = write_frames(out / rel, clip)
            clips.append({"name": rel, "split": split, "seed": seed, "frames": names})
    manifest = {"scene": cfg.to_dict(), "base_seed": base_seed,
                "counts": {s: counts.get(s, 0) for s in SPLITS}, "clips": clips}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path):
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    return json.loads(p.read_text()), p.parent


def load_split(path, split) -> list[VideoClip]:
    manifest, root = load_manifest(path)
    return [read_frames(root / c["name"], c["frames"], seed=c["seed"], split=split)
            for c in manifest["clips"] if c["split"] == split]


def stack_clips(clips, T_in, T_out):
    """(N, T_in, C, H, W) inputs and (N, T_out, C, H, W) targets from clip starts."""
    arr = np.stack([c.frames for c in clips])
    if arr.shape[1] < T_in + T_out:
        raise ValueError(f"clips have {arr.shape[1]} frames, need {T_in + T_out}")
    return arr[:, :T_in], arr[:, T_in : T_in + T_out]
