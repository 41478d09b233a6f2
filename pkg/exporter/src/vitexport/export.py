"""Export reference-model weights and calibration tokens to the container.

Weights are renamed from the timm-style module layout to the consumer's
canonical schema and transposed from [out, in] to [in, out]. One forward
pass is recorded (input tokens plus every block output) so the consumer can
prove cross-implementation agreement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import read_container, write_container
from .reference import (
    MODEL_REGISTRY,
    ReferenceViT,
    UnsupportedModelError,
    build_reference_model,
)

TOOL_VERSION = "0.1.0"

# source parameter -> canonical tensor, with transposition for linear weights
BLOCK_NAME_MAP = (
    ("norm1.weight", "ln1.gamma", False),
    ("norm1.bias", "ln1.beta", False),
    ("qkv.weight", "attn.qkv.weight", True),
    ("qkv.bias", "attn.qkv.bias", False),
    ("proj.weight", "attn.proj.weight", True),
    ("proj.bias", "attn.proj.bias", False),
    ("norm2.weight", "ln2.gamma", False),
    ("norm2.bias", "ln2.beta", False),
    ("fc1.weight", "mlp.fc1.weight", True),
    ("fc1.bias", "mlp.fc1.bias", False),
    ("fc2.weight", "mlp.fc2.weight", True),
    ("fc2.bias", "mlp.fc2.bias", False),
)


@dataclass
class ExportManifest:
    source_model: str
    tool_version: str
    tensor_name_map: dict
    config: dict
    checkpoint_file: str
    reference_file: str
    reference_tensors: dict = field(default_factory=dict)

    def validate(self, depth: int) -> None:
        canonical = list(self.tensor_name_map.values())
        if len(canonical) != len(set(canonical)):
            raise ValueError("canonical tensor names are not unique")
        for i in range(depth):
            for _, dst, _ in BLOCK_NAME_MAP:
                name = f"blocks.{i}.{dst}"
                if canonical.count(name) != 1:
                    raise ValueError(f"{name} appears {canonical.count(name)} times")

    def to_json(self) -> dict:
        return {
            "source_model": self.source_model,
            "tool_version": self.tool_version,
            "tensor_name_map": self.tensor_name_map,
            "config": self.config,
            "checkpoint_file": self.checkpoint_file,
            "reference_file": self.reference_file,
            "reference_tensors": self.reference_tensors,
        }


def _to_f32(t: torch.Tensor) -> np.ndarray:
    return t.detach().to(torch.float32).cpu().numpy()


def canonical_tensors(model: ReferenceViT) -> tuple[dict, dict]:
    """(tensors, name_map) in the consumer's schema."""
    cfg = model.config
    tensors = {
        "config": np.array([cfg.depth, cfg.dim, cfg.heads, cfg.mlp_ratio,
                            cfg.tokens], dtype=np.float32),
    }
    name_map = {}
    state = model.state_dict()
    for i in range(cfg.depth):
        for src, dst, transpose in BLOCK_NAME_MAP:
            key = f"blocks.{i}.{src}"
            value = _to_f32(state[key])
            if transpose:
                value = np.ascontiguousarray(value.T)
            canonical = f"blocks.{i}.{dst}"
            tensors[canonical] = value
            name_map[key] = canonical
    tensors["embed.proj.weight"] = _to_f32(state["patch_embed.weight"])
    tensors["embed.proj.bias"] = _to_f32(state["patch_embed.bias"])
    name_map["patch_embed.weight"] = "embed.proj.weight"
    name_map["patch_embed.bias"] = "embed.proj.bias"
    tensors["embed.pos"] = _to_f32(state["pos_embed"])
    name_map["pos_embed"] = "embed.pos"
    if cfg.use_cls_token:
        tensors["embed.cls"] = _to_f32(state["cls_token"])
        name_map["cls_token"] = "embed.cls"
    tensors["head.weight"] = np.ascontiguousarray(_to_f32(state["head.weight"]).T)
    tensors["head.bias"] = _to_f32(state["head.bias"])
    name_map["head.weight"] = "head.weight"
    name_map["head.bias"] = "head.bias"
    return tensors, name_map


def export_model(model_id: str, out_dir, seed: int = 0,
                 reference_batch: int = 2) -> ExportManifest:
    """Write <model_id>.ckpt, <model_id>.reference.ckpt, and the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    model = build_reference_model(model_id, seed=seed)
    cfg = model.config

    tensors, name_map = canonical_tensors(model)
    ckpt_path = out_dir / f"{model_id}.ckpt"
    write_container(ckpt_path, tensors)

    torch.manual_seed(seed + 1)
    images = torch.randn(reference_batch, 3, cfg.img_size, cfg.img_size)
    tokens = model.embed(images)
    outs = model.block_outputs(tokens)
    logits = model.classify_tokens(tokens)
    reference = {"reference.input": _to_f32(tokens),
                 "reference.logits": _to_f32(logits)}
    for i, out in enumerate(outs):
        reference[f"reference.block_output.{i}"] = _to_f32(out)
    ref_path = out_dir / f"{model_id}.reference.ckpt"
    write_container(ref_path, reference)

    manifest = ExportManifest(
        source_model=model_id,
        tool_version=TOOL_VERSION,
        tensor_name_map=name_map,
        config={"depth": cfg.depth, "dim": cfg.dim, "heads": cfg.heads,
                "mlp_ratio": cfg.mlp_ratio, "tokens": cfg.tokens},
        checkpoint_file=ckpt_path.name,
        reference_file=ref_path.name,
        reference_tensors={"input": "reference.input",
                           "block_outputs": [f"reference.block_output.{i}"
                                             for i in range(cfg.depth)],
                           "logits": "reference.logits"},
    )
    manifest.validate(cfg.depth)
    manifest_path = out_dir / f"{model_id}.manifest.json"
    manifest_path.write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True))
    return manifest


def export_calibration(dataset_path, n_samples: int, out_path,
                       model_id: str = "toy-vit", seed: int = 0) -> dict:
    """Embed ``n_samples`` images through the source model's patch embedding
    and store tokens plus integer labels in the container format.

    The dataset is an .npz archive with ``images`` (S, 3, H, W) and optional
    ``labels`` (S,). Selection is a seeded permutation, so a fixed seed picks
    identical samples.
    """
    if model_id not in MODEL_REGISTRY:
        raise UnsupportedModelError(f"unsupported model {model_id!r}")
    with np.load(dataset_path) as archive:
        if "images" not in archive:
            raise ValueError(f"{dataset_path} holds no 'images' array")
        images = archive["images"].astype(np.float32)
        labels = archive["labels"] if "labels" in archive else None
    if len(images) < n_samples:
        raise ValueError(
            f"dataset holds {len(images)} images but {n_samples} were requested")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.permutation(len(images))[:n_samples])

    torch.set_num_threads(1)
    model = build_reference_model(model_id, seed=seed)
    tokens = model.embed(torch.from_numpy(images[picked]))
    tensors = {"tokens": _to_f32(tokens)}
    if labels is not None:
        tensors["labels"] = labels[picked].astype(np.float32)
    write_container(out_path, tensors)
    return {"selected": picked.tolist(), "tokens_shape": list(tensors["tokens"].shape)}


def verify_export(out_dir, model_id: str) -> dict:
    """Re-read an export and report basic integrity facts (used by the CLI)."""
    out_dir = Path(out_dir)
    tensors = read_container(out_dir / f"{model_id}.ckpt")
    manifest = json.loads((out_dir / f"{model_id}.manifest.json").read_text())
    block_tensors = [n for n in tensors if n.startswith("blocks.")]
    return {
        "tensors": len(tensors),
        "block_tensors": len(block_tensors),
        "expected_block_tensors": 12 * manifest["config"]["depth"],
        "extras": sorted(n for n in tensors
                         if not n.startswith("blocks.") and n != "config"),
    }
