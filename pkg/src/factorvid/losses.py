"""Staged training objectives: pixel L1, gradient-difference + smoothness, feature-space."""
from __future__ import annotations

from dataclasses import dataclass, fields
from enum import IntEnum

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Stage(IntEnum):
    S1 = 1
    S2 = 2
    S3 = 3

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class CurriculumConfig:
    """Stage lengths in epochs and loss weights.

    The weight defaults (1.0, 0.1, 0.05) are local choices, not published values.
    """

    stage1_epochs: int = 20
    stage2_epochs: int = 10
    stage3_epochs: int = 5
    lambda_gdl: float = 1.0
    lambda_smooth: float = 0.1
    lambda_perc: float = 0.05

    def __post_init__(self):
        epochs = (self.stage1_epochs, self.stage2_epochs, self.stage3_epochs)
        if any(e < 0 for e in epochs) or sum(epochs) < 1:
            raise ValueError("stage epochs must be nonnegative with at least one epoch in total")
        if min(self.lambda_gdl, self.lambda_smooth, self.lambda_perc) < 0:
            raise ValueError("loss weights must be nonnegative")

    @property
    def total_epochs(self):
        return self.stage1_epochs + self.stage2_epochs + self.stage3_epochs

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def select_stage(epoch: int, cfg: CurriculumConfig) -> Stage:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.stage1_epochs:
        return Stage.S1
    if epoch < cfg.stage1_epochs + cfg.stage2_epochs:
        return Stage.S2
    return Stage.S3


class FeatureExtractor:
    """Frozen random conv features (3 stride-2 stages + Mish).

    Stands in for a pretrained network; any object with the same ``__call__``
    contract and no trainable parameters can replace it.
    """

    def __init__(self, in_channels=1, channels=(8, 16, 32), seed=1234, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.layers = []
        cin = in_channels
        for cout in channels:
            b = np.sqrt(1.0 / (cin * 9))
            k = Tensor(rng.uniform(-b, b, (cout, cin, 3, 3)).astype(dtype))
            bias = Tensor(rng.uniform(-b, b, (cout,)).astype(dtype))
            self.layers.append((k, bias))
            cin = cout
        self.in_channels = in_channels

    def parameters(self):
        return [t for layer in self.layers for t in layer]

    def astype(self, dtype):
        for t in self.parameters():
            t.data = t.data.astype(dtype)
        return self

    def __call__(self, images: Tensor) -> Tensor:
        """(N, C, H, W) -> (N, C_f, H/8, W/8)."""
        x = images
        for k, b in self.layers:
            x = nx.mish(nx.conv2d(x, k, b, stride=2))
        return x


def _same_shape(pred, target):
    if pred.shape != target.shape:
        raise nx.ShapeError(f"pred {pred.shape} and target {target.shape} differ")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target)
    return nx.reduce(nx.sub(pred, target), "abs_mean")


def gdl_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean |dx pred - dx target| plus mean |dy pred - dy target| over valid positions."""
    _same_shape(pred, target)
    if pred.shape[-1] < 2 or pred.shape[-2] < 2:
        raise nx.ShapeError("gdl_loss needs frames of at least 2x2")
    gx = nx.sub(nx.diff(pred, -1), nx.diff(target, -1))
    gy = nx.sub(nx.diff(pred, -2), nx.diff(target, -2))
    return nx.add(nx.reduce(gx, "abs_mean"), nx.reduce(gy, "abs_mean"))


def smooth_loss(pred: Tensor) -> Tensor:
    """Mean absolute frame-to-frame change of (B, T', C, H, W) predictions; 0 when T' == 1."""
    if pred.shape[1] < 2:
        return nx.scale(nx.reduce(pred, "sum"), 0.0)
    return nx.reduce(nx.diff(pred, 1), "abs_mean")


def perceptual_loss(pred: Tensor, target: Tensor, phi: FeatureExtractor) -> Tensor:
    """Squared feature distance per element, averaged over frames."""
    _same_shape(pred, target)
    lead = pred.shape[0] * pred.shape[1]
    img = pred.shape[2:]
    fp = phi(nx.reshape(pred, (lead,) + img))
    with nx.no_tape():
        ft = phi(Tensor(target.data.reshape((lead,) + img)))
    d = nx.sub(fp, ft)
    return nx.reduce(nx.hadamard(d, d), "mean")


def stage1_loss(pred, target, cfg=None, phi=None):
    return l1_loss(pred, target)


def stage2_loss(pred, target, cfg: CurriculumConfig, phi=None):
    total = l1_loss(pred, target)
    total = nx.add(total, nx.scale(gdl_loss(pred, target), cfg.lambda_gdl))
    return nx.add(total, nx.scale(smooth_loss(pred), cfg.lambda_smooth))


def stage3_loss(pred, target, cfg: CurriculumConfig, phi: FeatureExtractor):
    return nx.add(stage2_loss(pred, target, cfg),
                  nx.scale(perceptual_loss(pred, target, phi), cfg.lambda_perc))


STAGE_LOSSES = {Stage.S1: stage1_loss, Stage.S2: stage2_loss, Stage.S3: stage3_loss}


def loss_components(pred, target, phi) -> dict:
    """Unweighted values of every term, evaluated without recording."""
    with nx.no_tape():
        p, t = Tensor(pred.data), Tensor(target.data)
        return {
            "l1": float(l1_loss(p, t).data),
            "gdl": float(gdl_loss(p, t).data),
            "smooth": float(smooth_loss(p).data),
            "perc": float(perceptual_loss(p, t, phi).data),
        }
