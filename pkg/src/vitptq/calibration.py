"""Quantizer calibration: min/max scales, running statistics, eta search.

Scales follow the plain min/max rule s = (max - min) / (2^b - 1) with
z = round(-min / s); there is no percentile clipping. The SULQ shift bias eta
is grid-searched once, before any optimization, by minimizing the round-trip
MSE over candidate values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import CalibrationError, ContractError, DomainError
from .quantizers import (
    SCALE_FLOOR,
    QuantParams,
    round_half_away,
)
from .tensor import Tensor

ETA_GRID = np.logspace(-6.0, 0.0, 100)  # post-Softmax values lie in (0, 1]


def _samples_array(samples) -> np.ndarray:
    if isinstance(samples, Tensor):
        samples = samples.data
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("calibration needs at least one sample")
    return arr


def uniform_params_from_minmax(lo, hi, bits: int, granularity: str) -> QuantParams:
    """Eq.-style affine parameters from per-channel or global extrema."""
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    qmax = (1 << bits) - 1
    scale = np.maximum((hi - lo) / qmax, SCALE_FLOOR)
    zero = round_half_away(-lo / scale).astype(np.int64)
    return QuantParams(bits=bits, scheme="uniform", granularity=granularity,
                       scale=scale, zero_point=zero)


def calibrate_uniform(samples, bits: int, granularity: str = "layer") -> QuantParams:
    """Min/max uniform calibration, global or per last-axis channel."""
    arr = _samples_array(samples)
    if granularity == "layer":
        return uniform_params_from_minmax(arr.min(), arr.max(), bits, "layer")
    flat = arr.reshape(-1, arr.shape[-1])
    return uniform_params_from_minmax(flat.min(axis=0), flat.max(axis=0), bits, "channel")


def calibrate_log2(samples, bits: int) -> QuantParams:
    """Log2 scale is the sample maximum, mapping it to code 0.

    The scale snaps to the float32 grid so the bit-shift inference path can
    decompose it into a 24-bit integer mantissa.
    """
    arr = _samples_array(samples)
    if arr.min() < 0:
        raise DomainError("log2 calibration needs non-negative samples")
    scale = np.float64(np.float32(max(float(arr.max()), SCALE_FLOOR)))
    return QuantParams(bits=bits, scheme="log2", granularity="layer",
                       scale=np.array([scale]), zero_point=np.array([0]))


def _sulq_roundtrip_mse(x: np.ndarray, eta: float, bits: int) -> tuple[float, float, int]:
    """(mse, inner scale, inner zero point) for one eta candidate."""
    qmax = (1 << bits) - 1
    t = -np.log2(x + eta)
    t_min, t_max = t.min(), t.max()
    scale = max((t_max - t_min) / qmax, SCALE_FLOOR)
    zero = float(round_half_away(-t_min / scale))
    codes = np.clip(round_half_away(t / scale) + zero, 0, qmax)
    v = scale * (codes - zero)
    with np.errstate(over="ignore"):  # non-finite candidates are skipped upstream
        rebuilt = np.exp2(round_half_away(-v)) - eta
        mse = float(np.mean((rebuilt - x) ** 2))
    return mse, scale, int(zero)


def search_eta(samples, bits: int, candidates: Optional[Iterable[float]] = None) -> QuantParams:
    """Grid-search the SULQ shift bias minimizing round-trip MSE.

    Ties break toward the smallest eta. Runs once, before optimization; the
    winning inner uniform parameters are frozen into the result.
    """
    x = _samples_array(samples).reshape(-1)
    if x.min() < 0:
        raise DomainError("sulq calibration needs non-negative samples")
    grid = ETA_GRID if candidates is None else np.asarray(list(candidates), dtype=np.float64)
    best = None
    for eta in grid:
        if eta <= 0 or x.min() + eta <= 0:
            continue
        mse, scale, zero = _sulq_roundtrip_mse(x, float(eta), bits)
        if not np.isfinite(mse):
            continue
        if best is None or mse < best[0]:
            best = (mse, float(eta), scale, zero)
    if best is None:
        raise CalibrationError("no eta candidate produced a finite quantization error")
    _, eta, scale, zero = best
    return QuantParams(bits=bits, scheme="sulq", granularity="layer",
                       scale=np.array([scale]), zero_point=np.array([zero]), eta=eta)


@dataclass
class RunningStats:
    """Running min/max for one hook point, at layer and channel granularity."""

    layer_min: float = np.inf
    layer_max: float = -np.inf
    channel_min: Optional[np.ndarray] = None
    channel_max: Optional[np.ndarray] = None

    def update(self, arr: np.ndarray) -> None:
        arr = np.asarray(arr, dtype=np.float64)
        self.layer_min = min(self.layer_min, float(arr.min()))
        self.layer_max = max(self.layer_max, float(arr.max()))
        flat = arr.reshape(-1, arr.shape[-1])
        cmin = flat.min(axis=0)
        cmax = flat.max(axis=0)
        if self.channel_min is None:
            self.channel_min, self.channel_max = cmin, cmax
        else:
            self.channel_min = np.minimum(self.channel_min, cmin)
            self.channel_max = np.maximum(self.channel_max, cmax)


@dataclass
class SampleBuffer:
    """Bounded sample reservoir (prefix-deterministic in batch order)."""

    capacity: int = 1 << 18
    values: list = field(default_factory=list)
    count: int = 0

    def update(self, arr: np.ndarray) -> None:
        room = self.capacity - self.count
        if room <= 0:
            return
        flat = np.asarray(arr, dtype=np.float64).reshape(-1)[:room]
        self.values.append(flat)
        self.count += flat.size

    def array(self) -> np.ndarray:
        if not self.values:
            raise CalibrationError("no samples collected")
        return np.concatenate(self.values)


@dataclass
class CalibrationSet:
    """Ordered batches of pre-embedded token tensors, plus optional labels."""

    batches: list
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.batches:
            raise ContractError("calibration set must be non-empty")
        trailing = {b.shape[1:] for b in self.batches}
        if len(trailing) != 1:
            raise ContractError(f"calibration batches disagree on shape: {trailing}")

    @property
    def size(self) -> int:
        return sum(b.shape[0] for b in self.batches)

    @classmethod
    def from_samples(cls, samples: np.ndarray, batch_size: int,
                     labels: Optional[np.ndarray] = None) -> "CalibrationSet":
        samples = np.asarray(samples, dtype=np.float32)
        batches = [samples[i:i + batch_size]
                   for i in range(0, samples.shape[0], batch_size)]
        return cls(batches=batches, labels=labels)


class CalibrationArtifact:
    """Per-hook-point quantizer parameters, with every variant a run may need.

    Post-LayerNorm hooks carry both layer- and channel-wise uniform params;
    post-Softmax hooks carry the sulq/log2/uniform alternatives (the ablation
    switch picks among them); remaining activation hooks are layer-wise
    uniform only.
    """

    def __init__(self, bits_a: int, hooks: dict):
        self.bits_a = bits_a
        self.hooks = hooks  # hook name -> {variant name -> QuantParams}

    def act_params(self, postln_granularity: str = "channel",
                   softmax_scheme: str = "sulq") -> dict:
        from .model import POST_LN_HOOKS, SOFTMAX_HOOKS

        selected = {}
        for name, variants in self.hooks.items():
            leaf = name.split(".", 2)[-1]
            if leaf in POST_LN_HOOKS:
                key = "channel" if postln_granularity == "channel" else "layer"
            elif leaf in SOFTMAX_HOOKS:
                key = softmax_scheme
            else:
                key = "layer"
            if key not in variants:
                raise CalibrationError(f"hook {name!r} has no {key!r} params")
            selected[name] = variants[key]
        return selected

    def to_json(self) -> dict:
        return {
            "bits_a": self.bits_a,
            "hooks": {name: {k: p.to_json() for k, p in sorted(vs.items())}
                      for name, vs in sorted(self.hooks.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CalibrationArtifact":
        hooks = {name: {k: QuantParams.from_json(p) for k, p in vs.items()}
                 for name, vs in doc["hooks"].items()}
        return cls(bits_a=int(doc["bits_a"]), hooks=hooks)


def calibrate_model(model, calib: CalibrationSet, bits_a: int,
                    sample_capacity: int = 1 << 18) -> CalibrationArtifact:
    """Collect statistics over the calibration set and materialize QuantParams
    for every activation hook point of the model."""
    from .model import ACTIVATION_HOOKS, POST_LN_HOOKS, SOFTMAX_HOOKS, hook_names

    softmax_hooks = set()
    for i in range(len(model.blocks)):
        for name in hook_names(i):
            if name.split(".", 2)[-1] in SOFTMAX_HOOKS:
                softmax_hooks.add(name)
    stats, samples = collect_activation_stats(
        model, calib, sample_hooks=softmax_hooks, sample_capacity=sample_capacity)

    hooks = {}
    for name, st in stats.items():
        leaf = name.split(".", 2)[-1]
        if leaf not in ACTIVATION_HOOKS:
            continue  # weights calibrate from their current values at stage 3
        variants = {"layer": uniform_params_from_minmax(
            st.layer_min, st.layer_max, bits_a, "layer")}
        if leaf in POST_LN_HOOKS:
            variants["channel"] = uniform_params_from_minmax(
                st.channel_min, st.channel_max, bits_a, "channel")
        if leaf in SOFTMAX_HOOKS:
            x = samples[name]
            variants["sulq"] = search_eta(x, bits_a)
            variants["log2"] = calibrate_log2(x, bits_a)
            variants["uniform"] = variants.pop("layer")
            variants["layer"] = variants["uniform"]
        hooks[name] = variants
    return CalibrationArtifact(bits_a=bits_a, hooks=hooks)


def collect_activation_stats(model, calib: CalibrationSet,
                             hook_points: Optional[set] = None,
                             sample_hooks: Optional[set] = None,
                             sample_capacity: int = 1 << 18):
    """Full-precision forward over the calibration set, recording running
    min/max per hook point (and raw samples where the eta search needs them).

    Returns (stats: dict name -> RunningStats, samples: dict name -> ndarray).
    """
    from .model import StatsHooks, model_forward  # local import; model depends on quantizers

    stats: dict[str, RunningStats] = {}
    buffers: dict[str, SampleBuffer] = {}
    sample_hooks = sample_hooks or set()

    def observe(name: str, arr: np.ndarray) -> None:
        if hook_points is not None and name not in hook_points:
            return
        stats.setdefault(name, RunningStats()).update(arr)
        if name in sample_hooks:
            buffers.setdefault(name, SampleBuffer(capacity=sample_capacity)).update(arr)

    hooks = StatsHooks(observe)
    for batch in calib.batches:
        model_forward(model, Tensor(batch), hooks=hooks, tape=None)
    return stats, {name: buf.array() for name, buf in buffers.items()}
