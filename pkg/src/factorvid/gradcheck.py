"""Finite-difference gradient suite covering every differentiable op, model stage and loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, model
from . import numerics as nx
from .numerics import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    instance: int
    rel_error: float

    @property
    def passed(self):
        return self.rel_error < TOLERANCE


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


def _dims(rng, n, lo=1, hi=4):
    return [int(rng.integers(lo, hi + 1)) for _ in range(n)]


def faulty_mish(x):
    """Mish with a sign-flipped gradient; exercises the suite's failure reporting."""
    out = nx.mish(Tensor(x.data))

    def bw(g):
        sp = nx._softplus(x.data)
        tsp = np.tanh(sp)
        return (-g * (tsp + x.data * (1 - tsp * tsp) * nx._sigmoid(x.data)),)

    return nx._finish("mish", out.data, (x,), bw)


def _weighted_sum(y, rng):
    # random projection so every output entry contributes a distinct weight
    w = Tensor(rng.standard_normal(y.shape), dtype=np.float64)
    return nx.reduce(nx.hadamard(y, w), "sum")


def _case_linear(rng, ops):
    b, f, g = _dims(rng, 3, 1, 5)
    u, w, bias = _t(rng, 2, b, f), _t(rng, f, g), _t(rng, g)
    fr = rng_fixed(rng)
    return (lambda: _weighted_sum(ops["linear"](u, w, bias), fr)), [u, w, bias]


def rng_fixed(rng):
    # freeze a child generator so repeated closures draw identical projections
    seed = int(rng.integers(2 ** 31))
    return _Frozen(seed)


class _Frozen:
    def __init__(self, seed):
        self.seed = seed

    def standard_normal(self, shape):
        return np.random.default_rng(self.seed).standard_normal(shape)


def _unary(name):
    def case(rng, ops):
        x = _t(rng, *_dims(rng, 3, 1, 5), scale=2.0)
        fr = rng_fixed(rng)
        return (lambda: _weighted_sum(ops[name](x), fr)), [x]
    return case


def _case_hadamard(rng, ops):
    shape = _dims(rng, 3, 1, 4)
    a, b = _t(rng, *shape), _t(rng, *shape)
    fr = rng_fixed(rng)
    return (lambda: _weighted_sum(ops["hadamard"](a, b), fr)), [a, b]


def _case_add(rng, ops):
    shape = _dims(rng, 3, 1, 4)
    a, b = _t(rng, *shape), _t(rng, shape[-1])
    fr = rng_fixed(rng)
    return (lambda: _weighted_sum(nx.sub(nx.add(a, b), nx.scale(a, 0.3)), fr)), [a, b]


def _case_layer_norm(rng, ops):
    b, t, f = _dims(rng, 3, 2, 5)
    u, g, o = _t(rng, b, t, f), _t(rng, f), _t(rng, f)
    fr = rng_fixed(rng)
    return (lambda: _weighted_sum(ops["layer_norm"](u, g, o), fr)), [u, g, o]


def _case_conv2d(rng, ops):
    n, cin, cout = _dims(rng, 3, 1, 3)
    h, w = _dims(rng, 2, 3, 6)
    stride = int(rng.integers(1, 3))
    x, k, b = _t(rng, n, cin, h, w), _t(rng, cout, cin, 3, 3), _t(rng, cout)
    fr = rng_fixed(rng)
    return (lambda: _weighted_sum(ops["conv2d"](x, k, b, stride=stride), fr)), [x, k, b]


def _case_reshape(rng, ops):
    a, b, c = _dims(rng, 3, 1, 4)
    x = _t(rng, a, b, c)
    fr = rng_fixed(rng)
    return (lambda: _weighted_sum(nx.reshape(x, (a * b, c)), fr)), [x]


def _case_diff(rng, ops):
    shape = _dims(rng, 3, 2, 5)
    axis = int(rng.integers(0, 3))
    x = _t(rng, *shape)
    fr = rng_fixed(rng)
    return (lambda: _weighted_sum(nx.diff(x, axis), fr)), [x]


def _case_reduce(kind):
    def case(rng, ops):
        x = _t(rng, *_dims(rng, 3, 1, 5))
        return (lambda: ops["reduce"](x, kind)), [x]
    return case


def _block_weights(rng, T, M):
    lgu_t = model.LGUWeights(*(_t(rng, M, M, scale=M ** -0.5) for _ in range(4)))
    lgu_s = model.LGUWeights(*(_t(rng, T, T, scale=T ** -0.5) for _ in range(4)))
    return model.EVABlockWeights(_t(rng, M, scale=0.5), _t(rng, M, scale=0.5), lgu_t,
                                 _t(rng, T, scale=0.5), _t(rng, T, scale=0.5), lgu_s)


def _block_params(blk):
    ps = [blk.ln_time_gain, blk.ln_time_offset, blk.ln_space_gain, blk.ln_space_offset]
    for l in (blk.lgu_time, blk.lgu_space):
        ps += [l.w_k, l.w_v, l.w_r, l.w_o]
    return ps


def _case_block(fn_name):
    def case(rng, ops):
        b = int(rng.integers(1, 3))
        T, M = _dims(rng, 2, 2, 5)
        e = _t(rng, b, T, M)
        blk = _block_weights(rng, T, M)
        fn = getattr(model, fn_name)
        fr = rng_fixed(rng)
        return (lambda: _weighted_sum(fn(e, blk), fr)), [e] + _block_params(blk)
    return case


def _case_lgu(rng, ops):
    b, L, F = _dims(rng, 3, 1, 5)
    u = _t(rng, b, L, F)
    p = model.LGUWeights(*(_t(rng, F, F, scale=F ** -0.5) for _ in range(4)))
    fr = rng_fixed(rng)
    return (lambda: _weighted_sum(model.lgu(u, p), fr)), [u, p.w_k, p.w_v, p.w_r, p.w_o]


def tiny_config(T_in=2, T_out=2):
    return model.ModelConfig(T_in=T_in, T_out=T_out, C=1, H=16, W=16, stages=2,
                             base_channels=2, n_blocks=1, embed_width=4)


def _case_predict(rng, ops):
    cfg = tiny_config(T_out=int(rng.integers(1, 3)))
    w = model.init_weights(cfg, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    # push LN offsets off zero so every branch carries signal
    for blk in w.blocks:
        for t in (blk.ln_time_offset, blk.ln_space_offset):
            t.data = rng.standard_normal(t.shape) * 0.5
    x = Tensor(rng.random((1, cfg.T_in, 1, 16, 16)), dtype=np.float64)
    fr = rng_fixed(rng)
    return (lambda: _weighted_sum(model.predict(x, w), fr)), w.parameters()


def _case_stage(stage):
    def case(rng, ops):
        shape = (int(rng.integers(1, 3)), int(rng.integers(2, 4)), 1, 16, 16)
        pred, target = Tensor(rng.random(shape), dtype=np.float64), Tensor(rng.random(shape), dtype=np.float64)
        cur = losses.CurriculumConfig(1, 1, 1, *rng.uniform(0.1, 1.0, 3))
        phi = losses.FeatureExtractor(in_channels=1, channels=(2, 3, 4), seed=7, dtype=np.float64)
        fn = losses.STAGE_LOSSES[stage]
        return (lambda: fn(pred, target, cur, phi)), [pred]
    return case


CASES: dict[str, Callable] = {
    "linear": _case_linear,
    "mish": _unary("mish"),
    "sigmoid": _unary("sigmoid"),
    "abs": _unary("absolute"),
    "time_shift": _unary("time_shift"),
    "transpose_axes": _unary("transpose_axes"),
    "nearest_upsample2x": _unary("nearest_upsample2x"),
    "hadamard": _case_hadamard,
    "add_sub_scale": _case_add,
    "layer_norm": _case_layer_norm,
    "conv2d": _case_conv2d,
    "reshape": _case_reshape,
    "diff": _case_diff,
    "reduce_sum": _case_reduce("sum"),
    "reduce_mean": _case_reduce("mean"),
    "reduce_abs_mean": _case_reduce("abs_mean"),
    "lgu": _case_lgu,
    "time_mix": _case_block("time_mix"),
    "space_mix": _case_block("space_mix"),
    "eva_block": _case_block("eva_block"),
    "predict": _case_predict,
    "stage1_loss": _case_stage(losses.Stage.S1),
    "stage2_loss": _case_stage(losses.Stage.S2),
    "stage3_loss": _case_stage(losses.Stage.S3),
}


def default_ops():
    return {name: getattr(nx, name) for name in
            ("linear", "mish", "sigmoid", "absolute", "time_shift", "transpose_axes",
             "nearest_upsample2x", "hadamard", "layer_norm", "conv2d", "reduce")}


def run_suite(instances=20, seed=0, only=None, overrides=None, max_coords=64) -> list[CheckResult]:
    """Check each case on ``instances`` random draws in 64-bit.

    ``overrides`` replaces primitive ops by name (used to inject faults).
    Large parameters are spot-checked on ``max_coords`` random entries.
    """
    ops = default_ops()
    ops.update(overrides or {})
    results = []
    with nx.precision(np.float64):
        for name, make in CASES.items():
            if only and name not in only:
                continue
            for i in range(instances):
                rng = np.random.default_rng([seed, i, len(name)])
                fn, params = make(rng, ops)
                err = _check(fn, params, rng, max_coords)
                results.append(CheckResult(name, i, err))
    return results


def _check(fn, params, rng, max_coords):
    analytic = nx.analytic_grads(fn, params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat_idx = np.arange(p.size)
        if p.size > max_coords:
            flat_idx = rng.choice(p.size, size=max_coords, replace=False)
        num = _numeric_at(fn, p, flat_idx)
        worst = max(worst, nx.rel_error(ga.reshape(-1)[flat_idx], num))
    return worst


def _numeric_at(fn, p, idx, step=1e-5):
    flat = p.data.reshape(-1)
    out = np.empty(len(idx))
    with nx.no_tape():
        for j, i in enumerate(idx):
            orig = flat[i]
            h = step * (abs(orig) + 1.0)
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            out[j] = (fp - fm) / (2 * h)
    return out


def summarize(results) -> dict[str, tuple[bool, float, int]]:
    """Per op: (all passed, worst error, instance count)."""
    out = {}
    for r in results:
        ok, worst, n = out.get(r.op, (True, 0.0, 0))
        out[r.op] = (ok and r.passed, max(worst, r.rel_error), n + 1)
    return out
