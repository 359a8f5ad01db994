"""Curriculum training loop, Adam, and the binary checkpoint format."""
from __future__ import annotations

import io
import json
import math
import struct
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .losses import STAGE_LOSSES, CurriculumConfig, FeatureExtractor, Stage, loss_components, select_stage
from .metrics import psnr
from .model import ModelConfig, ModelWeights, init_weights, predict, predict_array

MAGIC = b"EVAC"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings. Defaults are local choices, not published values."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    steps_per_epoch: int = 5
    seed: int = 0
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    checkpoint_every: int = 0
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["curriculum"] = self.curriculum.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["curriculum"] = CurriculumConfig(**d.get("curriculum", {}))
        return cls(**d)


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, cfg: TrainConfig):
        return cls(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def adam_step(params: dict, grads: dict, state: OptimState):
    """Bias-corrected Adam update applied in place; ``state.step`` advances by one."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise nx.ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - upd).astype(p.dtype)


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads))


def _batches(n, batch_size, steps, rng):
    order = rng.permutation(n)
    need = steps * batch_size
    while order.size < need:
        order = np.concatenate([order, rng.permutation(n)])
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(steps)]


def train_epoch(model: ModelWeights, data, stage_loss, optim: OptimState, rng, *,
                cfg: TrainConfig, curriculum: CurriculumConfig, phi=None) -> dict:
    """One epoch of mini-batch updates. ``data`` is an (inputs, targets) array pair."""
    inputs, targets = data
    if len(inputs) == 0:
        raise TrainingError("empty training set")
    named = dict(model.named_parameters())
    losses, norms = [], []
    for bi, idx in enumerate(_batches(len(inputs), cfg.batch_size, cfg.steps_per_epoch, rng)):
        x = nx.Tensor(inputs[idx])
        y = nx.Tensor(targets[idx])
        for p in named.values():
            p.grad = None
        try:
            with nx.GradTape() as tape:
                loss = stage_loss(predict(x, model), y, curriculum, phi)
        except nx.NonFiniteError as exc:
            raise TrainingError(f"non-finite forward values at batch {bi}: {exc}") from exc
        lval = float(loss.data)
        if not math.isfinite(lval):
            raise TrainingError(f"non-finite loss at batch {bi}")
        nx.backward(loss, tape)
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in named.items()}
        norm = global_norm(grads.values())
        if cfg.clip_norm and norm > cfg.clip_norm:
            s = cfg.clip_norm / norm
            grads = {n: g * g.dtype.type(s) for n, g in grads.items()}
        adam_step(named, grads, optim)
        losses.append(lval)
        norms.append(norm)
    return {"loss": float(np.mean(losses)), "grad_norm": float(np.mean(norms))}


def evaluate(model: ModelWeights, val, phi) -> dict:
    vx, vy = val
    raw = predict_array(vx, model, clamp=False)
    comps = loss_components(nx.Tensor(raw), nx.Tensor(vy.astype(raw.dtype)), phi)
    comps["psnr"] = psnr(np.clip(raw, 0.0, 1.0), vy)
    return comps


def _fmt_row(row):
    return json.dumps(row, sort_keys=True)


def fit(model: ModelWeights, data, cfg: TrainConfig, *, val=None, phi=None,
        log_file=None, echo=True, checkpoint_dir=None, resume: "Checkpoint | None" = None,
        callback=None, final_checkpoint=None):
    """Run the staged curriculum; weights carry over unchanged between stages.

    Returns ``(model, rows)`` where ``rows`` holds one dict per epoch.
    """
    cur = cfg.curriculum
    phi = phi or FeatureExtractor(in_channels=model.cfg.C)
    if resume is not None:
        model.load_state_dict(resume.weights)
        optim = resume.optim
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch + 1
    else:
        optim = OptimState.for_config(cfg)
        rng = np.random.default_rng(cfg.seed)
        start = 0
    rows = []
    log = open(log_file, "a" if resume is not None else "w") if log_file else None
    try:
        for epoch in range(start, cur.total_epochs):
            stage = select_stage(epoch, cur)
            stats = train_epoch(model, data, STAGE_LOSSES[stage], optim, rng,
                                cfg=cfg, curriculum=cur, phi=phi)
            row = {"epoch": epoch, "stage": str(stage), "step": optim.step, **stats}
            if val is not None:
                row.update({f"val_{k}": v for k, v in evaluate(model, val, phi).items()})
            rows.append(row)
            line = _fmt_row(row)
            if echo:
                print(line, file=sys.stdout, flush=True)
            if log:
                log.write(line + "\n")
                log.flush()
            if callback is not None:
                callback(epoch, stage, model)
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                ck = Checkpoint(model.cfg, model.state_dict(), optim, epoch, rng.bit_generator.state, cfg)
                save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:04d}.evac", ck)
    finally:
        if log:
            log.close()
    if final_checkpoint:
        last = rows[-1]["epoch"] if rows else start - 1
        save_checkpoint(final_checkpoint,
                        Checkpoint(model.cfg, model.state_dict(), optim, last, rng.bit_generator.state, cfg))
    return model, rows


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    weights: dict
    optim: OptimState
    epoch: int
    rng_state: dict
    train_cfg: TrainConfig | None = None

    def to_model(self) -> ModelWeights:
        w = init_weights(self.model_cfg, seed=0)
        w.load_state_dict(self.weights)
        return w


def _write_tensor(buf, name, arr):
    arr = np.asarray(arr)
    code = {np.dtype("float32"): 0, np.dtype("float64"): 1}.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(struct.pack("<B", code))
    buf.write(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())


def save_checkpoint(path, ck: Checkpoint):
    meta = {
        "model": ck.model_cfg.to_dict(),
        "epoch": ck.epoch,
        "optim": {"lr": ck.optim.lr, "beta1": ck.optim.beta1, "beta2": ck.optim.beta2,
                  "eps": ck.optim.eps, "step": ck.optim.step},
        "rng_state": ck.rng_state,
        "train": ck.train_cfg.to_dict() if ck.train_cfg else None,
    }
    block = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    tensors = [(f"model/{n}", a) for n, a in ck.weights.items()]
    tensors += [(f"adam.m/{n}", a) for n, a in ck.optim.m.items()]
    tensors += [(f"adam.v/{n}", a) for n, a in ck.optim.v.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (blen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(blen).decode("utf-8"))
        mcfg = ModelConfig.from_dict(meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I")
        (code,) = r.unpack("<B")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unknown element type {code}")
        dt = DTYPE_CODES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")

    expected = {n: t.shape for n, t in init_weights(mcfg, seed=0).named_parameters()}
    weights = {n[len("model/"):]: a for n, a in tensors.items() if n.startswith("model/")}
    if set(weights) != set(expected):
        raise CheckpointError(f"{path}: tensor names disagree with embedded model config")
    for n, shape in expected.items():
        if weights[n].shape != shape:
            raise CheckpointError(f"{path}: {n} has shape {weights[n].shape}, config implies {shape}")
    om = meta["optim"]
    optim = OptimState(lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"], eps=om["eps"], step=om["step"])
    for n, a in tensors.items():
        if n.startswith("adam.m/"):
            optim.m[n[len("adam.m/"):]] = a
        elif n.startswith("adam.v/"):
            optim.v[n[len("adam.v/"):]] = a
    tcfg = TrainConfig.from_dict(meta["train"]) if meta.get("train") else None
    return Checkpoint(mcfg, weights, optim, meta["epoch"], meta["rng_state"], tcfg)
