"""Analytic per-layer cost of translator variants under a roofline latency bound."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

GB = 10 ** 9

# Byte footprints and the Mamba FLOP count are taken as published constants:
# the stated asymptotic forms do not determine them.
TABLE1_BYTES = {"RWKV": 2.4 * GB, "Mamba": 1.8 * GB, "EVA": 1.0 * GB}
MAMBA_FLOPS = 3.92e11

CSV_HEADER = ["method", "T", "S", "D", "L", "flops", "bytes", "latency_ms", "bound"]


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    peak_compute: float  # FLOP/s
    mem_bandwidth: float  # bytes/s

    def __post_init__(self):
        if not (self.peak_compute > 0 and self.mem_bandwidth > 0):
            raise ValueError("peak_compute and mem_bandwidth must be positive")


@dataclass(frozen=True)
class WorkloadShape:
    T: int
    S: int
    D: int

    def __post_init__(self):
        if min(self.T, self.S, self.D) < 1:
            raise ValueError("T, S and D must all be >= 1")

    @property
    def L(self):
        return self.S * self.T


REFERENCE_WORKLOAD = WorkloadShape(T=10, S=16384, D=512)


@dataclass(frozen=True)
class CostRow:
    method: str
    workload: WorkloadShape
    flops: float
    bytes: float
    latency_seconds: float
    bound: str

    @property
    def latency_ms(self):
        return self.latency_seconds * 1e3

    def csv_row(self):
        w = self.workload
        return [self.method, w.T, w.S, w.D, w.L, repr(self.flops), repr(self.bytes),
                repr(self.latency_ms), self.bound]


def load_presets(path=None) -> dict[str, HardwareSpec]:
    if path is None:
        text = resources.files("factorvid").joinpath("hardware.yaml").read_text()
    else:
        text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    return {name: HardwareSpec(name, float(v["peak_compute"]), float(v["mem_bandwidth"]))
            for name, v in raw.items()}


def get_preset(name: str, path=None) -> HardwareSpec:
    presets = load_presets(path)
    if name not in presets:
        raise KeyError(f"unknown hardware preset {name!r}; known: {', '.join(sorted(presets))}")
    return presets[name]


# Python ints keep every formula exact regardless of size.

def flops_vit(w: WorkloadShape) -> int:
    L, D = w.L, w.D
    return 2 * L * L * D + 4 * L * D * D


def bytes_vit(w: WorkloadShape) -> int:
    return 2 * w.L * w.L


def flops_linear(w: WorkloadShape) -> int:
    return 8 * w.L * w.D * w.D


def flops_eva(w: WorkloadShape) -> int:
    return 4 * (w.T + w.S) * w.D * w.D


def roofline_latency(flops, nbytes, hw: HardwareSpec) -> tuple[float, str]:
    """``max(flops / peak, bytes / bandwidth)``; ties count as compute-bound."""
    t_compute = flops / hw.peak_compute
    t_memory = nbytes / hw.mem_bandwidth
    if t_compute >= t_memory:
        return t_compute, "compute"
    return t_memory, "memory"


def _row(method, w, flops, nbytes, hw):
    lat, bound = roofline_latency(flops, nbytes, hw)
    return CostRow(method, w, flops, nbytes, lat, bound)


def table1(hw: HardwareSpec, w: WorkloadShape = REFERENCE_WORKLOAD, byte_constants=None,
           mamba_flops=MAMBA_FLOPS) -> list[CostRow]:
    consts = TABLE1_BYTES if byte_constants is None else byte_constants
    missing = {"RWKV", "Mamba", "EVA"} - set(consts)
    if missing:
        raise KeyError(f"missing byte constants for {sorted(missing)}")
    return [
        _row("ViT", w, flops_vit(w), bytes_vit(w), hw),
        _row("RWKV", w, flops_linear(w), consts["RWKV"], hw),
        _row("Mamba", w, mamba_flops, consts["Mamba"], hw),
        _row("EVA", w, flops_eva(w), consts["EVA"], hw),
    ]


def sweep(hw: HardwareSpec, resolutions, Ts, Ds, downsample=8, byte_constants=None):
    """Rows for every (method, resolution, T, D); ``S = (res / downsample)**2``."""
    rows = []
    for res in resolutions:
        if res % downsample:
            raise ValueError(f"resolution {res} not divisible by {downsample}")
        S = (res // downsample) ** 2
        for T in Ts:
            for D in Ds:
                rows.extend(table1(hw, WorkloadShape(T=T, S=S, D=D), byte_constants))
    return rows


def to_csv(rows, path=None) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_HEADER)
    for r in rows:
        wr.writerow(r.csv_row())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def format_table(rows) -> str:
    """Console table; latency shown to 2 significant figures."""
    lines = [f"{'method':<8}{'FLOPs':>12}{'Bytes':>12}{'latency (ms)':>15}  bound"]
    for r in rows:
        lines.append(f"{r.method:<8}{r.flops:>12.3g}{r.bytes / GB:>10.3g}GB{r.latency_ms:>15.2g}  {r.bound}")
    return "\n".join(lines)
