"""Transformer-block stack with fake-quant hooks at every matmul operand.

Blocks follow the standard pre-LN layout: Z = MHSA(LN(X)) + X, then
X' = MLP(LN(Z)) + Z, with per-head scaled-dot-product attention and an
erf GELU in the MLP. Every matmul input and weight passes through a hook,
so quantization, statistics collection, or nothing at all can be spliced in
per call. LayerNorm and Softmax themselves always run in full precision.

Weights are stored (in_features, out_features), so the channel axis of a
weight is its last axis, same as for activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import (
    ConfigurationError,
    ContractError,
    MissingTensorError,
    TensorShapeError,
)
from .quantizers import QuantParams, fake_quant
from .tensor import GradTape, Tensor

CONFIG_TENSOR = "config"  # [depth, dim, heads, mlp_ratio, tokens] as f32

BLOCK_PARAM_NAMES = (
    "attn.qkv.weight", "attn.qkv.bias",
    "attn.proj.weight", "attn.proj.bias",
    "mlp.fc1.weight", "mlp.fc1.bias",
    "mlp.fc2.weight", "mlp.fc2.bias",
    "ln1.gamma", "ln1.beta",
    "ln2.gamma", "ln2.beta",
)

ACTIVATION_HOOKS = (
    "ln1.out", "attn.q", "attn.k", "attn.softmax", "attn.v",
    "attn.proj.in", "ln2.out", "mlp.fc2.in",
)
WEIGHT_HOOKS = (
    "attn.qkv.weight", "attn.proj.weight", "mlp.fc1.weight", "mlp.fc2.weight",
)
POST_LN_HOOKS = ("ln1.out", "ln2.out")
SOFTMAX_HOOKS = ("attn.softmax",)


@dataclass
class ModelConfig:
    depth: int
    dim: int
    heads: int
    mlp_ratio: float
    tokens: int

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_array(self) -> np.ndarray:
        return np.array([self.depth, self.dim, self.heads, self.mlp_ratio, self.tokens],
                        dtype=np.float32)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ModelConfig":
        depth, dim, heads, ratio, tokens = [float(v) for v in np.asarray(arr).reshape(-1)]
        return cls(int(depth), int(dim), int(heads), ratio, int(tokens))


@dataclass
class ViTBlock:
    """Weights and affine parameters of one transformer block."""

    w_qkv: Tensor
    b_qkv: Tensor
    w_o: Tensor
    b_o: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    heads: int
    head_dim: int

    def __post_init__(self):
        d = self.heads * self.head_dim
        expect = {
            "attn.qkv.weight": (d, 3 * d),
            "attn.qkv.bias": (3 * d,),
            "attn.proj.weight": (d, d),
            "attn.proj.bias": (d,),
            "mlp.fc1.weight": (d, self.w1.shape[-1]),
            "mlp.fc1.bias": (self.w1.shape[-1],),
            "mlp.fc2.weight": (self.w1.shape[-1], d),
            "mlp.fc2.bias": (d,),
            "ln1.gamma": (d,), "ln1.beta": (d,),
            "ln2.gamma": (d,), "ln2.beta": (d,),
        }
        for name, shape in expect.items():
            got = self.params()[name].shape
            if got != shape:
                raise TensorShapeError(f"block tensor {name} has shape {got}, expected {shape}")

    def params(self) -> dict[str, Tensor]:
        return {
            "attn.qkv.weight": self.w_qkv, "attn.qkv.bias": self.b_qkv,
            "attn.proj.weight": self.w_o, "attn.proj.bias": self.b_o,
            "mlp.fc1.weight": self.w1, "mlp.fc1.bias": self.b1,
            "mlp.fc2.weight": self.w2, "mlp.fc2.bias": self.b2,
            "ln1.gamma": self.ln1_gamma, "ln1.beta": self.ln1_beta,
            "ln2.gamma": self.ln2_gamma, "ln2.beta": self.ln2_beta,
        }

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params().values():
            t.requires_grad = flag

    def copy(self) -> "ViTBlock":
        kw = {f: Tensor(getattr(self, f).data.copy()) for f in (
            "w_qkv", "b_qkv", "w_o", "b_o", "w1", "b1", "w2", "b2",
            "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")}
        return ViTBlock(heads=self.heads, head_dim=self.head_dim, **kw)

    @classmethod
    def from_params(cls, params: dict[str, Tensor], heads: int, head_dim: int) -> "ViTBlock":
        return cls(
            w_qkv=params["attn.qkv.weight"], b_qkv=params["attn.qkv.bias"],
            w_o=params["attn.proj.weight"], b_o=params["attn.proj.bias"],
            w1=params["mlp.fc1.weight"], b1=params["mlp.fc1.bias"],
            w2=params["mlp.fc2.weight"], b2=params["mlp.fc2.bias"],
            ln1_gamma=params["ln1.gamma"], ln1_beta=params["ln1.beta"],
            ln2_gamma=params["ln2.gamma"], ln2_beta=params["ln2.beta"],
            heads=heads, head_dim=head_dim,
        )


@dataclass
class Model:
    config: ModelConfig
    blocks: list
    extras: dict = field(default_factory=dict)  # head/embedding tensors, unquantized

    def copy(self) -> "Model":
        def dup(v):
            return Tensor(v.data.copy()) if isinstance(v, Tensor) else v.copy()

        return Model(config=self.config,
                     blocks=[b.copy() for b in self.blocks],
                     extras={k: dup(v) for k, v in self.extras.items()})

    def set_requires_grad(self, flag: bool) -> None:
        for b in self.blocks:
            b.set_requires_grad(flag)


# ---------------------------------------------------------------------------
# hooks

class IdentityHooks:
    """Hooks disabled: every point passes through unchanged."""

    def apply(self, name: str, t: Tensor, tape: Optional[GradTape]) -> Tensor:
        return t


class QuantHooks:
    """Applies fake quantization per hook point.

    The map must cover every hook point the forward pass touches; a missing
    entry is a configuration error. Mapping a name to None disables that
    point explicitly.
    """

    def __init__(self, params: dict[str, Optional[QuantParams]]):
        self.params = dict(params)

    def apply(self, name: str, t: Tensor, tape: Optional[GradTape]) -> Tensor:
        if name not in self.params:
            raise ConfigurationError(f"quantization hook map has no entry for {name!r}")
        p = self.params[name]
        if p is None:
            return t
        return fake_quant(t, p, tape)


class StatsHooks:
    """Forwards each hooked array to an observer callback, value unchanged."""

    def __init__(self, observe: Callable[[str, np.ndarray], None]):
        self.observe = observe

    def apply(self, name: str, t: Tensor, tape: Optional[GradTape]) -> Tensor:
        self.observe(name, t.data)
        return t


def hook_names(block_index: int) -> list[str]:
    prefix = f"blocks.{block_index}."
    return [prefix + h for h in ACTIVATION_HOOKS + WEIGHT_HOOKS]


# ---------------------------------------------------------------------------
# forward

def mhsa(h: Tensor, blk: ViTBlock, hooks, tape: Optional[GradTape],
         prefix: str = "blocks.0.") -> Tensor:
    """Multi-head self-attention over an already-normalized (B, N, D) input."""
    if h.ndim != 3:
        raise ContractError(f"mhsa expects (batch, tokens, dim), got {h.shape}")
    b, n, d = h.shape
    heads, dh = blk.heads, blk.head_dim

    w_qkv = hooks.apply(prefix + "attn.qkv.weight", blk.w_qkv, tape)
    qkv = T.linear(h, w_qkv, blk.b_qkv, tape)  # (B, N, 3D)
    qkv = T.reshape(qkv, (b, n, 3, heads, dh), tape)
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4), tape)  # (3, B, H, N, Dh)

    def head_slice(idx: int) -> Tensor:
        part = T.slice_axis(qkv, 0, idx, idx + 1, tape)
        return T.reshape(part, (b, heads, n, dh), tape)

    q = hooks.apply(prefix + "attn.q", head_slice(0), tape)
    k = hooks.apply(prefix + "attn.k", head_slice(1), tape)
    v = hooks.apply(prefix + "attn.v", head_slice(2), tape)

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2), tape), tape),
                     1.0 / np.sqrt(dh), tape)
    probs = T.softmax(scores, -1, tape)  # rows sum to 1 before quantization
    probs = hooks.apply(prefix + "attn.softmax", probs, tape)

    ctx = T.matmul(probs, v, tape)  # (B, H, N, Dh)
    ctx = T.transpose(ctx, (0, 2, 1, 3), tape)
    ctx = T.reshape(ctx, (b, n, d), tape)
    ctx = hooks.apply(prefix + "attn.proj.in", ctx, tape)
    w_o = hooks.apply(prefix + "attn.proj.weight", blk.w_o, tape)
    return T.linear(ctx, w_o, blk.b_o, tape)


def block_forward(x: Tensor, blk: ViTBlock, hooks=None, tape: Optional[GradTape] = None,
                  prefix: str = "blocks.0.") -> Tensor:
    """One transformer block: Z = MHSA(LN(X)) + X; out = MLP(LN(Z)) + Z."""
    hooks = hooks or IdentityHooks()
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape, tape)
    if x.ndim != 3 or x.shape[-1] != blk.heads * blk.head_dim:
        raise ContractError(
            f"block_forward input {x.shape} does not match dim {blk.heads * blk.head_dim}"
        )

    h = T.layernorm(x, blk.ln1_gamma, blk.ln1_beta, tape=tape)
    h = hooks.apply(prefix + "ln1.out", h, tape)
    z = T.add(mhsa(h, blk, hooks, tape, prefix), x, tape)

    h2 = T.layernorm(z, blk.ln2_gamma, blk.ln2_beta, tape=tape)
    h2 = hooks.apply(prefix + "ln2.out", h2, tape)
    w1 = hooks.apply(prefix + "mlp.fc1.weight", blk.w1, tape)
    a = T.gelu(T.linear(h2, w1, blk.b1, tape), tape)
    a = hooks.apply(prefix + "mlp.fc2.in", a, tape)
    w2 = hooks.apply(prefix + "mlp.fc2.weight", blk.w2, tape)
    out = T.add(T.linear(a, w2, blk.b2, tape), z, tape)

    if squeeze:
        out = T.reshape(out, out.shape[1:], tape)
    return out


def model_forward(model: Model, x: Tensor, hooks=None,
                  tape: Optional[GradTape] = None) -> Tensor:
    for i, blk in enumerate(model.blocks):
        x = block_forward(x, blk, hooks, tape, prefix=f"blocks.{i}.")
    return x


def classify(model: Model, tokens: Tensor, hooks=None,
             tape: Optional[GradTape] = None) -> Tensor:
    """Mean-pool block outputs and project through the (unquantized) head."""
    if "head.weight" not in model.extras:
        raise ConfigurationError("model has no classifier head")
    out = model_forward(model, tokens, hooks, tape)
    if out.ndim == 2:
        out = T.reshape(out, (1,) + out.shape, tape)
    n = out.shape[1]
    pooled = T.scale(T.sum_axis(out, 1, tape), 1.0 / n, tape)
    w = model.extras["head.weight"]
    b = model.extras.get("head.bias")
    head_w = w if isinstance(w, Tensor) else Tensor(w)
    logits = T.matmul(pooled, head_w, tape)
    if b is not None:
        head_b = b if isinstance(b, Tensor) else Tensor(b)
        logits = T.add(logits, head_b, tape)
    return logits


# ---------------------------------------------------------------------------
# checkpoint IO

def save_model(model: Model, path) -> None:
    tensors = {CONFIG_TENSOR: model.config.to_array()}
    for i, blk in enumerate(model.blocks):
        for name, t in blk.params().items():
            tensors[f"blocks.{i}.{name}"] = t.data
    for name, arr in model.extras.items():
        tensors[name] = arr.data if isinstance(arr, Tensor) else arr
    write_container(path, tensors)


def load_checkpoint(path) -> Model:
    tensors = read_container(path)
    if CONFIG_TENSOR not in tensors:
        raise MissingTensorError(f"{path}: missing {CONFIG_TENSOR!r} tensor")
    if tensors[CONFIG_TENSOR].size != 5:
        raise TensorShapeError(f"{path}: {CONFIG_TENSOR!r} must hold 5 values")
    config = ModelConfig.from_array(tensors.pop(CONFIG_TENSOR))

    d, hidden = config.dim, config.hidden
    expect = {
        "attn.qkv.weight": (d, 3 * d), "attn.qkv.bias": (3 * d,),
        "attn.proj.weight": (d, d), "attn.proj.bias": (d,),
        "mlp.fc1.weight": (d, hidden), "mlp.fc1.bias": (hidden,),
        "mlp.fc2.weight": (hidden, d), "mlp.fc2.bias": (d,),
        "ln1.gamma": (d,), "ln1.beta": (d,),
        "ln2.gamma": (d,), "ln2.beta": (d,),
    }
    blocks = []
    for i in range(config.depth):
        params = {}
        for name in BLOCK_PARAM_NAMES:
            full = f"blocks.{i}.{name}"
            if full not in tensors:
                raise MissingTensorError(f"{path}: missing tensor {full!r}")
            arr = tensors.pop(full)
            if arr.shape != expect[name]:
                raise TensorShapeError(
                    f"{path}: {full!r} has shape {arr.shape}, expected {expect[name]}"
                )
            params[name] = Tensor(arr)
        blocks.append(ViTBlock.from_params(params, config.heads, config.head_dim))
    return Model(config=config, blocks=blocks, extras=tensors)
