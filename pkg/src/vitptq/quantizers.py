"""Uniform, log2, and shift-uniform-log2 quantizers.

All three share the same affine-code machinery: quantize maps float32 values
to integer codes, dequantize maps codes back. The shift-uniform-log2 (SULQ)
variant shifts the input by a bias eta, takes -log2, and quantizes that
transformed domain uniformly; its dequantization rounds back to an integer
exponent so inference can run on bit shifts.

Rounding is half-away-from-zero everywhere. Channel granularity always means
the last axis of the quantized array (columns for weights stored as
(in, out), feature channels for activations).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    ContractError,
    DomainError,
    FixedPointRangeError,
    ParameterError,
)
from .tensor import GradTape, Tensor

SCHEMES = ("uniform", "log2", "sulq")
GRANULARITIES = ("layer", "channel")
SCALE_FLOOR = 1e-8  # degenerate-calibration guard
SHIFT_EXP_MIN = -30  # fixed-point budget for the bit-shift inference path
SHIFT_EXP_MAX = 0


def round_half_away(x):
    """Round to nearest with ties away from zero (numpy rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class QuantParams:
    """Frozen per-quantizer state.

    ``scale``/``zero_point`` have length 1 for layer granularity and one entry
    per channel otherwise. For SULQ they parameterize the inner uniform
    quantizer over the transformed domain t = -log2(x + eta).
    """

    bits: int
    scheme: str
    granularity: str
    scale: np.ndarray
    zero_point: np.ndarray
    eta: Optional[float] = None

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ParameterError(f"bits must be in [2, 8], got {self.bits}")
        if self.scheme not in SCHEMES:
            raise ParameterError(f"unknown scheme {self.scheme!r}")
        if self.granularity not in GRANULARITIES:
            raise ParameterError(f"unknown granularity {self.granularity!r}")
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int64))
        if self.scale.ndim != 1 or self.scale.shape != self.zero_point.shape:
            raise ParameterError("scale and zero_point must be 1-D and the same length")
        if self.granularity == "layer" and len(self.scale) != 1:
            raise ParameterError("layer granularity needs exactly one scale")
        if np.any(self.scale <= 0) or not np.all(np.isfinite(self.scale)):
            raise ParameterError("scale entries must be positive and finite")
        if self.scheme == "sulq":
            if self.eta is None:
                raise ParameterError("sulq requires eta")
            # eta == 0 is tolerated so the pure power-of-two table is expressible
            if self.eta < 0 or not np.isfinite(self.eta):
                raise ParameterError("eta must be non-negative and finite")
        elif self.eta is not None:
            raise ParameterError(f"eta is only valid for sulq, not {self.scheme}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    def match_channels(self, x: np.ndarray) -> None:
        if self.granularity == "channel" and len(self.scale) != x.shape[-1]:
            raise ParameterError(
                f"channel params have {len(self.scale)} scales but input has "
                f"{x.shape[-1]} channels"
            )

    def to_json(self) -> dict:
        doc = {
            "bits": int(self.bits),
            "scheme": self.scheme,
            "granularity": self.granularity,
            "scale": [float(s) for s in self.scale],
            "zero_point": [int(z) for z in self.zero_point],
        }
        if self.eta is not None:
            doc["eta"] = float(self.eta)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "QuantParams":
        return cls(
            bits=int(doc["bits"]),
            scheme=doc["scheme"],
            granularity=doc["granularity"],
            scale=np.asarray(doc["scale"], dtype=np.float64),
            zero_point=np.asarray(doc["zero_point"], dtype=np.int64),
            eta=float(doc["eta"]) if "eta" in doc else None,
        )


@dataclass
class FakeQuantResult:
    dequantized: Tensor
    integer_codes: np.ndarray = field(repr=False)


def _check_codes(q: np.ndarray, p: QuantParams) -> np.ndarray:
    q = np.asarray(q)
    if q.size and (q.min() < 0 or q.max() > p.qmax):
        raise ContractError(
            f"codes out of range [0, {p.qmax}]: found [{q.min()}, {q.max()}]"
        )
    return q.astype(np.int64)


# ---------------------------------------------------------------------------
# uniform quantizer

def uq_quant(x, p: QuantParams) -> np.ndarray:
    if p.scheme != "uniform":
        raise ParameterError(f"uq_quant needs uniform params, got {p.scheme}")
    x = _data(x).astype(np.float64)
    p.match_channels(x)
    codes = round_half_away(x / p.scale) + p.zero_point
    return np.clip(codes, 0, p.qmax).astype(np.int64)


def uq_dequant(q, p: QuantParams) -> np.ndarray:
    if p.scheme != "uniform":
        raise ParameterError(f"uq_dequant needs uniform params, got {p.scheme}")
    q = _check_codes(q, p)
    return (p.scale * (q - p.zero_point)).astype(np.float32)


# ---------------------------------------------------------------------------
# log2 quantizer (non-negative inputs)

def lq_quant(x, p: QuantParams) -> np.ndarray:
    if p.scheme != "log2":
        raise ParameterError(f"lq_quant needs log2 params, got {p.scheme}")
    x = _data(x).astype(np.float64)
    p.match_channels(x)
    if x.size and x.min() < 0:
        raise DomainError(f"log2 quantizer needs non-negative input, min={x.min()}")
    with np.errstate(divide="ignore"):
        t = -np.log2(x / p.scale)  # x == 0 -> +inf -> clamps to the max code
    return np.clip(round_half_away(t), 0, p.qmax).astype(np.int64)


def lq_dequant(q, p: QuantParams) -> np.ndarray:
    if p.scheme != "log2":
        raise ParameterError(f"lq_dequant needs log2 params, got {p.scheme}")
    q = _check_codes(q, p)
    return (p.scale * np.exp2(-q.astype(np.float64))).astype(np.float32)


# ---------------------------------------------------------------------------
# shift-uniform-log2 quantizer

def _sulq_transform(x: np.ndarray, p: QuantParams) -> np.ndarray:
    shifted = x + p.eta
    if shifted.size and shifted.min() <= 0:
        raise DomainError(
            f"sulq needs x + eta > 0 elementwise, min(x + eta) = {shifted.min()}"
        )
    return -np.log2(shifted)


def sulq_quant(x, p: QuantParams) -> np.ndarray:
    if p.scheme != "sulq":
        raise ParameterError(f"sulq_quant needs sulq params, got {p.scheme}")
    x = _data(x).astype(np.float64)
    p.match_channels(x)
    t = _sulq_transform(x, p)
    codes = round_half_away(t / p.scale) + p.zero_point
    return np.clip(codes, 0, p.qmax).astype(np.int64)


def sulq_exponents(q, p: QuantParams) -> np.ndarray:
    """Integer exponents E such that dequant(q) = 2**E - eta."""
    q = _check_codes(q, p)
    v = p.scale * (q - p.zero_point).astype(np.float64)
    return round_half_away(-v).astype(np.int64)


def sulq_dequant(q, p: QuantParams) -> np.ndarray:
    if p.scheme != "sulq":
        raise ParameterError(f"sulq_dequant needs sulq params, got {p.scheme}")
    e = sulq_exponents(q, p)
    return (np.exp2(e.astype(np.float64)) - p.eta).astype(np.float32)


# ---------------------------------------------------------------------------
# dispatch helpers

_QUANT = {"uniform": uq_quant, "log2": lq_quant, "sulq": sulq_quant}
_DEQUANT = {"uniform": uq_dequant, "log2": lq_dequant, "sulq": sulq_dequant}


def quantize(x, p: QuantParams) -> np.ndarray:
    return _QUANT[p.scheme](x, p)


def dequantize(q, p: QuantParams) -> np.ndarray:
    return _DEQUANT[p.scheme](q, p)


def quantize_dequantize(x, p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    codes = quantize(x, p)
    return dequantize(codes, p), codes


def fake_quant_result(x, p: QuantParams) -> FakeQuantResult:
    values, codes = quantize_dequantize(x, p)
    return FakeQuantResult(dequantized=Tensor(values), integer_codes=codes)


def unclamped_code_mask(x, p: QuantParams) -> np.ndarray:
    """True where the pre-clamp code already lies inside [0, 2^bits - 1]."""
    x = _data(x).astype(np.float64)
    p.match_channels(x)
    if p.scheme == "uniform":
        pre = round_half_away(x / p.scale) + p.zero_point
    elif p.scheme == "log2":
        if x.size and x.min() < 0:
            raise DomainError("log2 quantizer needs non-negative input")
        with np.errstate(divide="ignore"):
            pre = round_half_away(-np.log2(x / p.scale))
    else:
        pre = round_half_away(_sulq_transform(x, p) / p.scale) + p.zero_point
    return (pre >= 0) & (pre <= p.qmax)


def fake_quant(x: Tensor, p: QuantParams, tape: Optional[GradTape] = None) -> Tensor:
    """Forward dequant(quant(x)); backward is the clamp-gated straight-through
    estimator: gradients pass unchanged where the pre-clamp code was in range
    and are zeroed where the value saturated."""
    values, _ = quantize_dequantize(x.data, p)
    out = Tensor(values, requires_grad=x.requires_grad)
    if tape is not None and x.requires_grad:
        mask = unclamped_code_mask(x.data, p).astype(np.float32)

        def bwd(g):
            return (g * mask,)

        tape.record((x,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# integer bit-shift inference for the log2 family

def _check_shift_budget(exponents: np.ndarray) -> None:
    if exponents.size == 0:
        return
    lo, hi = int(exponents.min()), int(exponents.max())
    if lo < SHIFT_EXP_MIN or hi > SHIFT_EXP_MAX:
        raise FixedPointRangeError(
            f"value exponents [{lo}, {hi}] exceed the fixed-point budget "
            f"[{SHIFT_EXP_MIN}, {SHIFT_EXP_MAX}]"
        )


def shift_infer_dequant(q, p: QuantParams) -> np.ndarray:
    """Dequantize log2/sulq codes via integer mantissa shifts.

    Bit-exact with the float path: the power-of-two factor is rebuilt from an
    integer mantissa and an integer exponent, so the only rounding is the
    final float32 conversion shared with the float path.
    """
    if p.scheme == "log2":
        q = _check_codes(q, p)
        mant, exp = np.frexp(p.scale)
        m24 = np.ldexp(mant, 24)  # f32 scales have 24-bit mantissas, so exact
        m_int = m24.astype(np.int64)
        if np.any(m24 != m_int):
            raise FixedPointRangeError("scale mantissa does not fit 24 bits")
        total_exp = exp - q  # value lies in [2^(total_exp-1), 2^total_exp)
        _check_shift_budget(total_exp - 1)
        return np.ldexp(m_int.astype(np.float64), total_exp - 24).astype(np.float32)
    if p.scheme == "sulq":
        e = sulq_exponents(q, p)
        _check_shift_budget(e)
        mant = np.int64(1) << (e - SHIFT_EXP_MIN)  # Q30 fixed point, 31 bits max
        pow2 = np.ldexp(mant.astype(np.float64), SHIFT_EXP_MIN)
        return (pow2 - p.eta).astype(np.float32)
    raise ParameterError(f"shift inference supports log2/sulq, not {p.scheme}")
