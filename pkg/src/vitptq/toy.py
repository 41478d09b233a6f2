"""Bundled desk-scale fixture: a small transformer trained on a synthetic task.

The task is 4-way classification of token grids whose class signature lives
at very different magnitudes across channels. LayerNorm gains start with a
wide log-spread and stay there through the short training run, so post-LN
activations exhibit the strong inter-channel variation that makes the
channel-wise/layer-wise granularity distinction matter at low bit widths.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ContractError
from .model import Model, ModelConfig, ViTBlock, classify
from .sos import Adam, cosine_lr
from .tensor import GradTape, Tensor


def generate_task(rng: np.random.Generator, n_samples: int, tokens: int = 16,
                  dim: int = 64, classes: int = 4, noise: float = 0.35,
                  channel_spread: float = 8.0):
    """Class-conditional token patterns with log-spread channel magnitudes."""
    channel_scale = np.exp2(rng.uniform(-np.log2(channel_spread),
                                        np.log2(channel_spread), size=dim))
    means = rng.normal(size=(classes, tokens, dim)) * channel_scale
    labels = rng.integers(0, classes, size=n_samples)
    data = means[labels] + rng.normal(size=(n_samples, tokens, dim)) * noise * channel_scale
    return data.astype(np.float32), labels.astype(np.int64)


def build_toy_model(rng: np.random.Generator, depth: int = 2, dim: int = 64,
                    heads: int = 4, tokens: int = 16, mlp_ratio: float = 2.0,
                    classes: int = 4, gamma_spread: float = 4.0,
                    qk_gain_base: float = 2.0, wo_gain: float = 2.0) -> Model:
    config = ModelConfig(depth=depth, dim=dim, heads=heads,
                         mlp_ratio=mlp_ratio, tokens=tokens)
    hidden = config.hidden
    dh = config.head_dim
    blocks = []
    for _ in range(depth):
        def w(fan_in, *shape, gain=1.0):
            return Tensor((rng.normal(size=shape) * gain / np.sqrt(fan_in)
                           ).astype(np.float32))

        w_qkv = w(dim, dim, 3 * dim)
        # attention sharpness ladder across heads: flat through near-one-hot,
        # so post-Softmax values populate many octaves (the long-tail regime
        # the log-family quantizers are meant for)
        for h in range(heads):
            w_qkv.data[:, h * dh:(h + 1) * dh] *= qk_gain_base ** h
            w_qkv.data[:, dim + h * dh:dim + (h + 1) * dh] *= qk_gain_base ** h
        blocks.append(ViTBlock(
            w_qkv=w_qkv, b_qkv=w(dim, 3 * dim),
            w_o=w(dim, dim, dim, gain=wo_gain), b_o=w(dim, dim),
            w1=w(dim, dim, hidden), b1=w(dim, hidden),
            w2=w(hidden, hidden, dim), b2=w(hidden, dim),
            ln1_gamma=Tensor(np.exp2(rng.uniform(-np.log2(gamma_spread),
                                                 np.log2(gamma_spread), dim)
                                     ).astype(np.float32)),
            ln1_beta=Tensor((rng.normal(size=dim) * 0.1).astype(np.float32)),
            ln2_gamma=Tensor(np.exp2(rng.uniform(-np.log2(gamma_spread),
                                                 np.log2(gamma_spread), dim)
                                     ).astype(np.float32)),
            ln2_beta=Tensor((rng.normal(size=dim) * 0.1).astype(np.float32)),
            heads=heads, head_dim=dim // heads,
        ))
    extras = {
        "head.weight": Tensor((rng.normal(size=(dim, classes)) / np.sqrt(dim)
                               ).astype(np.float32)),
        "head.bias": Tensor(np.zeros(classes, dtype=np.float32)),
    }
    return Model(config=config, blocks=blocks, extras=extras)


def train_toy_model(model: Model, data: np.ndarray, labels: np.ndarray,
                    iterations: int = 240, lr: float = 6e-3, batch_size: int = 16,
                    seed: int = 0) -> list:
    """Fit the synthetic task with Adam on an MSE-to-one-hot objective."""
    classes = model.extras["head.weight"].shape[-1]
    onehot = np.eye(classes, dtype=np.float32)[labels]
    params = [p for blk in model.blocks for p in blk.params().values()]
    params += [model.extras["head.weight"], model.extras["head.bias"]]
    for p in params:
        p.requires_grad = True
    adam = Adam(params)
    rng = np.random.default_rng(seed)
    losses = []
    for it in range(iterations):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        tape = GradTape()
        logits = classify(model, Tensor(data[idx]), tape=tape)
        loss = T.l2_diff(logits, Tensor(onehot[idx]), tape)
        losses.append(loss.item())
        T.backward(loss, tape)
        adam.step(cosine_lr(lr, it, iterations))
        adam.zero_grad()
    for p in params:
        p.requires_grad = False
    return losses


def accuracy(model: Model, data: np.ndarray, labels: np.ndarray, hooks=None,
             batch_size: int = 32) -> float:
    hits = 0
    for i in range(0, len(data), batch_size):
        logits = classify(model, Tensor(data[i:i + batch_size]), hooks=hooks)
        hits += int((np.argmax(logits.data, axis=-1) == labels[i:i + batch_size]).sum())
    return hits / len(data)


def write_dataset(path, tokens: np.ndarray, labels=None) -> None:
    tensors = {"tokens": np.asarray(tokens, dtype=np.float32)}
    if labels is not None:
        tensors["labels"] = np.asarray(labels, dtype=np.float32)
    write_container(path, tensors)


def read_dataset(path):
    tensors = read_container(path)
    if "tokens" not in tensors:
        raise ContractError(f"{path} holds no 'tokens' tensor")
    labels = tensors.get("labels")
    if labels is not None:
        labels = labels.astype(np.int64)
    return tensors["tokens"], labels


def make_toy_bundle(out_dir, seed: int = 0, train_samples: int = 128,
                    calib_samples: int = 32, eval_samples: int = 64,
                    train_iterations: int = 240) -> dict:
    """Train the toy model and write checkpoint + calibration/eval datasets."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    total = train_samples + calib_samples + eval_samples
    data, labels = generate_task(rng, total)
    model = build_toy_model(rng)
    train_toy_model(model, data[:train_samples], labels[:train_samples],
                    iterations=train_iterations, seed=seed)

    paths = {
        "checkpoint": out_dir / "toy_model.ckpt",
        "calibration": out_dir / "toy_calib.ckpt",
        "eval": out_dir / "toy_eval.ckpt",
    }
    from .model import save_model

    save_model(model, paths["checkpoint"])
    c0, c1 = train_samples, train_samples + calib_samples
    write_dataset(paths["calibration"], data[c0:c1], labels[c0:c1])
    write_dataset(paths["eval"], data[c1:], labels[c1:])
    return {k: str(v) for k, v in paths.items()}
