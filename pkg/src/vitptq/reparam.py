"""Lossless transition from channel-wise to layer-wise activation quantizers.

Rewrites the LayerNorm affine parameters feeding a linear layer, and that
layer's weights, so a single layer-wise (scale, zero point) pair reproduces
the codes of the original per-channel quantizer. Weights must still be in
full precision when the rewrite happens; that is what makes the transition
exact rather than approximate.

The zero-point mean is rounded to an integer before entering r2: integer
shifts commute with rounding, so quantizer codes match exactly, while a
fractional shift would systematically move a frac(mean(z)) share of values
across rounding boundaries. The round-free mean is kept on the plan for
reporting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError
from .model import ViTBlock
from .quantizers import QuantParams, round_half_away
from .tensor import Tensor


@dataclass
class ReparamPlan:
    """Per-channel rescale factors for one post-LayerNorm site."""

    r1: np.ndarray  # s / s_tilde, > 0
    r2: np.ndarray  # z - round(z_tilde)
    s_tilde: float
    z_tilde: float  # round-free mean of the channel zero points
    bits: int

    def __post_init__(self):
        self.r1 = np.asarray(self.r1, dtype=np.float64)
        self.r2 = np.asarray(self.r2, dtype=np.float64)
        if np.any(self.r1 <= 0):
            raise ParameterError("r1 entries must be positive")

    @property
    def channel_scales(self) -> np.ndarray:
        return self.r1 * self.s_tilde

    @property
    def shift(self) -> np.ndarray:
        """The s (.) r2 vector entering the affine rewrite."""
        return self.channel_scales * self.r2

    def layer_params(self) -> QuantParams:
        return QuantParams(
            bits=self.bits, scheme="uniform", granularity="layer",
            scale=np.array([self.s_tilde]),
            zero_point=np.array([int(round_half_away(self.z_tilde))]),
        )

    def to_json(self) -> dict:
        return {
            "r1": [float(v) for v in self.r1],
            "r2": [float(v) for v in self.r2],
            "s_tilde": float(self.s_tilde),
            "z_tilde": float(self.z_tilde),
            "bits": int(self.bits),
        }


def build_plan(p: QuantParams) -> ReparamPlan:
    """Plan the channel-wise -> layer-wise transition for uniform params."""
    if p.granularity != "channel":
        raise ContractError("build_plan needs channel-wise params")
    if p.scheme != "uniform":
        raise ContractError("scale reparameterization applies to uniform quantizers")
    s = p.scale.astype(np.float64)
    z = p.zero_point.astype(np.float64)
    s_tilde = float(s.mean())
    z_tilde = float(z.mean())
    z_int = float(round_half_away(z_tilde))
    return ReparamPlan(r1=s / s_tilde, r2=z - z_int,
                       s_tilde=s_tilde, z_tilde=z_tilde, bits=p.bits)


def invert_plan(plan: ReparamPlan) -> ReparamPlan:
    """Plan whose application undoes ``plan`` on the affine parameters."""
    return ReparamPlan(r1=1.0 / plan.r1, r2=-plan.r1 * plan.r2,
                       s_tilde=plan.s_tilde, z_tilde=0.0, bits=plan.bits)


def apply_plan_arrays(plan: ReparamPlan, gamma, beta, weight, bias):
    """Rewrite (gamma, beta) of the LayerNorm and (weight, bias) of the next
    layer; returns float32 copies. Computation runs in float64."""
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gamma.shape != plan.r1.shape or weight.shape[0] != plan.r1.shape[0]:
        raise ContractError(
            f"plan over {plan.r1.shape[0]} channels does not fit gamma {gamma.shape} "
            f"/ weight {weight.shape}"
        )
    shift = plan.shift
    new_gamma = (gamma / plan.r1).astype(np.float32)
    new_beta = ((beta + shift) / plan.r1).astype(np.float32)
    new_weight = (plan.r1[:, None] * weight).astype(np.float32)
    new_bias = (bias - shift @ weight).astype(np.float32)
    return new_gamma, new_beta, new_weight, new_bias


LN_SITES = {
    "ln1": ("ln1_gamma", "ln1_beta", "w_qkv", "b_qkv"),
    "ln2": ("ln2_gamma", "ln2_beta", "w1", "b1"),
}


def apply_plan(plan: ReparamPlan, blk: ViTBlock, site: str) -> QuantParams:
    """Apply the rewrite to one LayerNorm site of a block, in place.

    Returns the layer-wise QuantParams replacing the channel-wise ones.
    """
    if site not in LN_SITES:
        raise ContractError(f"unknown LayerNorm site {site!r}")
    g_name, b_name, w_name, bias_name = LN_SITES[site]
    gamma, beta, weight, bias = apply_plan_arrays(
        plan,
        getattr(blk, g_name).data, getattr(blk, b_name).data,
        getattr(blk, w_name).data, getattr(blk, bias_name).data,
    )
    setattr(blk, g_name, Tensor(gamma))
    setattr(blk, b_name, Tensor(beta))
    setattr(blk, w_name, Tensor(weight))
    setattr(blk, bias_name, Tensor(bias))
    return plan.layer_params()
