"""Three-stage smooth optimization over block-wise reconstruction.

Stage 1 fine-tunes full-precision weights against channel-wise-quantized
post-LayerNorm activations (other activations layer-wise, post-Softmax via
SULQ). Stage 2 losslessly reparameterizes those channel-wise quantizers to
layer-wise ones. Stage 3 quantizes the weights too and fine-tunes again.

Each block optimizes in isolation: the student consumes the cached
full-precision input of its block and reconstructs the cached full-precision
output of the original model (L2 norm), so gradients never cross block
boundaries. Quantization parameters are frozen once calibrated; only weights
move. Adam with cosine learning-rate decay to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .calibration import CalibrationSet, uniform_params_from_minmax
from .container import read_container, write_container
from .errors import ConfigurationError, NumericalError
from .model import (
    ACTIVATION_HOOKS,
    POST_LN_HOOKS,
    WEIGHT_HOOKS,
    Model,
    QuantHooks,
    block_forward,
)
from .quantizers import QuantParams, quantize_dequantize
from .reparam import apply_plan, build_plan
from .tensor import GradTape, Tensor


def default_iterations(bits: int) -> int:
    return 200 if bits == 6 else 1000


@dataclass
class SOSConfig:
    bits_w: int
    bits_a: int
    lr: float = 4e-5
    weight_decay: float = 0.0
    iterations: int = 1000
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        # 0 iterations is an explicit no-op (useful for stage gating tests)
        if self.iterations < 0:
            raise ConfigurationError("iterations must be non-negative")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")


def cosine_lr(base_lr: float, iteration: int, total: int) -> float:
    """Cosine decay reaching exactly zero at the final iteration."""
    if total <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * iteration / (total - 1)))


class Adam:
    """Standard Adam; the learning rate is supplied per step (cosine decay)."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - np.float32(lr) * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def block_loss(fp_out: Tensor, q_out: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Reconstruction objective: L2 norm of the block-output difference."""
    return T.l2_diff(q_out, fp_out, tape)


# ---------------------------------------------------------------------------
# teacher cache

class TeacherCache:
    """Per-block full-precision inputs and outputs over the calibration set.

    Built once from the original model. When the in-memory footprint exceeds
    ``max_bytes`` the arrays spill to container files (one per block) and load
    back on demand; round-trips are bitwise because the container stores raw
    float32.
    """

    def __init__(self, inputs, outputs, spill_dir=None):
        self._inputs = inputs  # per block: list of arrays, or a file path
        self._outputs = outputs
        self._spill_dir = spill_dir
        self._loaded: dict[int, tuple[list, list]] = {}

    @classmethod
    def build(cls, model: Model, calib: CalibrationSet,
              spill_dir=None, max_bytes: Optional[int] = None) -> "TeacherCache":
        inputs, outputs = [], []
        current = [np.asarray(b, dtype=np.float32) for b in calib.batches]
        for i, blk in enumerate(model.blocks):
            outs = [block_forward(Tensor(x), blk, None, None, f"blocks.{i}.").data
                    for x in current]
            inputs.append(current)
            outputs.append(outs)
            current = outs
        cache = cls(inputs, outputs)
        nbytes = sum(a.nbytes for per in (inputs, outputs) for batch in per for a in batch)
        if max_bytes is not None and nbytes > max_bytes:
            if spill_dir is None:
                raise ConfigurationError("teacher cache exceeds budget and no spill dir given")
            cache._spill(Path(spill_dir))
        return cache

    def _spill(self, spill_dir: Path) -> None:
        spill_dir.mkdir(parents=True, exist_ok=True)
        for l in range(len(self._inputs)):
            tensors = {}
            for j, arr in enumerate(self._inputs[l]):
                tensors[f"in.{j}"] = arr
            for j, arr in enumerate(self._outputs[l]):
                tensors[f"out.{j}"] = arr
            path = spill_dir / f"teacher_block{l}.ckpt"
            write_container(path, tensors)
            self._inputs[l] = path
            self._outputs[l] = path
        self._spill_dir = spill_dir

    def _block_arrays(self, l: int) -> tuple[list, list]:
        if isinstance(self._inputs[l], (str, Path)):
            if l not in self._loaded:
                tensors = read_container(self._inputs[l])
                n = len([k for k in tensors if k.startswith("in.")])
                self._loaded.clear()  # keep at most one spilled block resident
                self._loaded[l] = ([tensors[f"in.{j}"] for j in range(n)],
                                   [tensors[f"out.{j}"] for j in range(n)])
            return self._loaded[l]
        return self._inputs[l], self._outputs[l]

    def num_batches(self, l: int = 0) -> int:
        ins, _ = self._block_arrays(l)
        return len(ins)

    def input(self, l: int, batch: int) -> np.ndarray:
        return self._block_arrays(l)[0][batch]

    def target(self, l: int, batch: int) -> np.ndarray:
        return self._block_arrays(l)[1][batch]


# ---------------------------------------------------------------------------
# reporting

@dataclass
class ReconstructionReport:
    """Loss trajectory per (block, stage), plus whole-set initial/final loss."""

    records: list = field(default_factory=list)  # (block, stage, iteration, loss)
    summaries: list = field(default_factory=list)  # {block, stage, initial, final}

    def add_record(self, block: int, stage: int, iteration: int, loss: float) -> None:
        self.records.append((block, stage, iteration, float(loss)))

    def add_summary(self, block: int, stage: int, initial: float, final: float) -> None:
        self.summaries.append({"block": block, "stage": stage,
                               "initial": float(initial), "final": float(final)})

    def final_losses(self, stage: Optional[int] = None) -> list:
        rows = [s for s in self.summaries if stage is None or s["stage"] == stage]
        return [s["final"] for s in rows]

    def merge(self, other: "ReconstructionReport") -> None:
        self.records.extend(other.records)
        self.summaries.extend(other.summaries)

    def to_json(self) -> dict:
        # execution is stage-major; the artifact orders by (block, stage, iteration)
        ordered = sorted(self.records)
        summaries = sorted(self.summaries, key=lambda s: (s["block"], s["stage"]))
        return {"records": [list(r) for r in ordered], "summaries": summaries}

    @classmethod
    def from_json(cls, doc: dict) -> "ReconstructionReport":
        rep = cls()
        rep.records = [tuple(r) for r in doc["records"]]
        rep.summaries = list(doc["summaries"])
        return rep


# ---------------------------------------------------------------------------
# quantization state

@dataclass
class QuantState:
    """Current hook-point parameters threaded through the pipeline stages."""

    act_params: dict  # hook name -> QuantParams
    weight_params: dict = field(default_factory=dict)  # name -> QuantParams

    def hook_map(self, model: Model, quantize_weights: bool) -> dict:
        hooks = {}
        for i in range(len(model.blocks)):
            prefix = f"blocks.{i}."
            for h in ACTIVATION_HOOKS:
                hooks[prefix + h] = self.act_params[prefix + h]
            for w in WEIGHT_HOOKS:
                name = prefix + w
                hooks[name] = self.weight_params.get(name) if quantize_weights else None
        return hooks

    def postln_granularities(self, model: Model) -> set:
        out = set()
        for i in range(len(model.blocks)):
            for h in POST_LN_HOOKS:
                out.add(self.act_params[f"blocks.{i}.{h}"].granularity)
        return out

    def to_json(self) -> dict:
        return {
            "act_params": {k: v.to_json() for k, v in sorted(self.act_params.items())},
            "weight_params": {k: v.to_json() for k, v in sorted(self.weight_params.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "QuantState":
        return cls(
            act_params={k: QuantParams.from_json(v) for k, v in doc["act_params"].items()},
            weight_params={k: QuantParams.from_json(v)
                           for k, v in doc["weight_params"].items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "QuantState":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# evaluation helper

def block_losses(model: Model, teacher: TeacherCache, hooks: Optional[QuantHooks]) -> list:
    """Mean-over-batches reconstruction loss of every block under ``hooks``."""
    losses = []
    for l, blk in enumerate(model.blocks):
        vals = []
        for j in range(teacher.num_batches(l)):
            out = block_forward(Tensor(teacher.input(l, j)), blk, hooks, None,
                                f"blocks.{l}.")
            vals.append(block_loss(Tensor(teacher.target(l, j)), out).item())
        losses.append(float(np.mean(vals)))
    return losses


# ---------------------------------------------------------------------------
# stages

def _rng_for(seed: int, stage: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(stage, block)))


def _tune_blocks(model: Model, teacher: TeacherCache, state: QuantState,
                 cfg: SOSConfig, stage: int, quantize_weights: bool,
                 block_indices=None) -> ReconstructionReport:
    """Shared stage-1/stage-3 loop: per-block Adam over the reconstruction loss."""
    report = ReconstructionReport()
    hooks = QuantHooks(state.hook_map(model, quantize_weights))
    model.set_requires_grad(False)
    indices = range(len(model.blocks)) if block_indices is None else block_indices
    for l in indices:
        blk = model.blocks[l]
        prefix = f"blocks.{l}."
        initial = _single_block_loss(model, teacher, hooks, l)
        blk.set_requires_grad(True)
        params = list(blk.params().values())
        adam = Adam(params, weight_decay=cfg.weight_decay)
        rng = _rng_for(cfg.seed, stage, l)
        for it in range(cfg.iterations):
            j = int(rng.integers(teacher.num_batches(l)))
            tape = GradTape()
            out = block_forward(Tensor(teacher.input(l, j)), blk, hooks, tape, prefix)
            loss = block_loss(Tensor(teacher.target(l, j)), out, tape)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite reconstruction loss at block {l}, stage {stage}, "
                    f"iteration {it}"
                )
            report.add_record(l, stage, it, value)
            T.backward(loss, tape)
            adam.step(cosine_lr(cfg.lr, it, cfg.iterations))
            adam.zero_grad()
        blk.set_requires_grad(False)
        final = _single_block_loss(model, teacher, hooks, l)
        report.add_summary(l, stage, initial, final)
    return report


def _single_block_loss(model: Model, teacher: TeacherCache, hooks, l: int) -> float:
    vals = []
    for j in range(teacher.num_batches(l)):
        out = block_forward(Tensor(teacher.input(l, j)), model.blocks[l], hooks, None,
                            f"blocks.{l}.")
        vals.append(block_loss(Tensor(teacher.target(l, j)), out).item())
    return float(np.mean(vals))


def run_stage1(model: Model, teacher: TeacherCache, state: QuantState,
               cfg: SOSConfig, block_indices=None) -> ReconstructionReport:
    """Full-precision weights, quantized activations (post-LN channel-wise)."""
    return _tune_blocks(model, teacher, state, cfg, stage=1,
                        quantize_weights=False, block_indices=block_indices)


def run_stage2(model: Model, state: QuantState) -> list:
    """Reparameterize every channel-wise post-LN quantizer to layer-wise.

    Mutates the model weights and the activation params in place; returns the
    plans for the run report.
    """
    plans = []
    for i, blk in enumerate(model.blocks):
        for hook, site in ((f"blocks.{i}.ln1.out", "ln1"), (f"blocks.{i}.ln2.out", "ln2")):
            p = state.act_params[hook]
            if p.granularity != "channel":
                continue
            plan = build_plan(p)
            state.act_params[hook] = apply_plan(plan, blk, site)
            plans.append({"hook": hook, **plan.to_json()})
    leftover = state.postln_granularities(model) - {"layer"}
    if leftover:
        raise ConfigurationError(f"stage 2 left non-layer granularities: {leftover}")
    return plans


def calibrate_weight_params(model: Model, bits_w: int) -> dict:
    """Channel-wise uniform params for every weight, from the current weights."""
    out = {}
    for i, blk in enumerate(model.blocks):
        for name in WEIGHT_HOOKS:
            w = blk.params()[name].data
            flat = w.reshape(-1, w.shape[-1])
            out[f"blocks.{i}.{name}"] = uniform_params_from_minmax(
                flat.min(axis=0), flat.max(axis=0), bits_w, "channel")
    return out


def run_stage3(model: Model, teacher: TeacherCache, state: QuantState,
               cfg: SOSConfig, block_indices=None) -> ReconstructionReport:
    """Weights fake-quantized (channel-wise) on top of quantized activations."""
    if state.postln_granularities(model) != {"layer"}:
        raise ConfigurationError(
            "stage 3 requires layer-wise post-LayerNorm quantizers; run stage 2 first"
        )
    if not state.weight_params:
        state.weight_params = calibrate_weight_params(model, cfg.bits_w)
    return _tune_blocks(model, teacher, state, cfg, stage=3,
                        quantize_weights=True, block_indices=block_indices)


def materialize_weights(model: Model, state: QuantState) -> None:
    """Snap weights onto their quantization grid for deployment."""
    for i, blk in enumerate(model.blocks):
        for name in WEIGHT_HOOKS:
            p = state.weight_params.get(f"blocks.{i}.{name}")
            if p is None:
                continue
            t = blk.params()[name]
            values, _ = quantize_dequantize(t.data, p)
            t.data = values


def run_sos(model: Model, teacher: TeacherCache, state: QuantState, cfg: SOSConfig,
            stages=(1, 2, 3)) -> tuple[ReconstructionReport, list]:
    """Run the requested stages in order on ``model`` (mutated in place)."""
    report = ReconstructionReport()
    plans = []
    for stage in stages:
        if stage == 1:
            report.merge(run_stage1(model, teacher, state, cfg))
        elif stage == 2:
            plans = run_stage2(model, state)
        elif stage == 3:
            report.merge(run_stage3(model, teacher, state, cfg))
        else:
            raise ConfigurationError(f"unknown stage {stage}")
    return report, plans
