"""Loss-landscape probing and quantizer-comparison reports.

The landscape probe perturbs two randomly chosen weight channels of a block
along constant basis directions (in units of each channel's weight standard
deviation) and evaluates the block reconstruction loss on a grid, under a
selectable quantization configuration:

    a: channel-wise quantized weights + layer-wise activations
    b: full-precision weights       + layer-wise activations
    c: full-precision weights       + channel-wise post-LN activations

Everything is emitted as plain grid data (CSV + JSON sidecar) for external
plotting; nothing renders in-process.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibrationArtifact, calibrate_log2, calibrate_uniform, search_eta
from .errors import ConfigurationError
from .model import Model, QuantHooks, block_forward
from .quantizers import quantize_dequantize, unclamped_code_mask
from .sos import QuantState, TeacherCache, block_loss, calibrate_weight_params
from .tensor import Tensor

LANDSCAPE_CONFIGS = ("a", "b", "c")


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # shape (len(alphas), len(betas))
    block_index: int
    config_label: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.losses.shape != (len(self.alphas), len(self.betas)):
            raise ConfigurationError(
                f"losses shape {self.losses.shape} does not match grid "
                f"({len(self.alphas)}, {len(self.betas)})"
            )

    def write_csv(self, path) -> None:
        """Header row carries the alphas; the first column carries the betas."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["beta\\alpha"] + [repr(float(a)) for a in self.alphas])
            for j, b in enumerate(self.betas):
                writer.writerow([repr(float(b))] +
                                [repr(float(v)) for v in self.losses[:, j]])

    def write_metadata(self, path) -> None:
        doc = {
            "block_index": self.block_index,
            "config_label": self.config_label,
            "alphas": [float(a) for a in self.alphas],
            "betas": [float(b) for b in self.betas],
            "min_loss": float(np.min(self.losses)),
            "mean_loss": float(np.mean(self.losses)),
            **self.metadata,
        }
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def _config_hooks(model: Model, artifact: CalibrationArtifact, config_label: str,
                  bits_w: int) -> QuantHooks:
    if config_label not in LANDSCAPE_CONFIGS:
        raise ConfigurationError(f"unknown landscape configuration {config_label!r}")
    postln = "channel" if config_label == "c" else "layer"
    state = QuantState(act_params=artifact.act_params(postln_granularity=postln))
    quantize_weights = config_label == "a"
    if quantize_weights:
        state.weight_params = calibrate_weight_params(model, bits_w)
    return QuantHooks(state.hook_map(model, quantize_weights=quantize_weights))


def probe_landscape(model: Model, block_index: int, config_label: str,
                    artifact: CalibrationArtifact, teacher: TeacherCache,
                    bits_w: int, grid_points: int = 21, span: float = 0.5,
                    seed: int = 0, max_batches: int = 2) -> LandscapeGrid:
    """Evaluate the block loss on a perturbation grid; weights are restored
    bitwise afterwards. Non-finite losses record as +inf, not failure."""
    blk = model.blocks[block_index]
    hooks = _config_hooks(model, artifact, config_label, bits_w)
    rng = np.random.default_rng(seed)
    w = blk.w_qkv
    c1, c2 = rng.choice(w.shape[-1], size=2, replace=False)
    sigma1 = float(w.data[:, c1].std()) or 1.0
    sigma2 = float(w.data[:, c2].std()) or 1.0

    alphas = np.linspace(-span, span, grid_points)
    betas = np.linspace(-span, span, grid_points)
    original = w.data.copy()
    n_batches = min(max_batches, teacher.num_batches(block_index))
    losses = np.empty((grid_points, grid_points))
    try:
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                w.data[:, c1] = original[:, c1] + np.float32(a * sigma1)
                w.data[:, c2] = original[:, c2] + np.float32(b * sigma2)
                vals = []
                for k in range(n_batches):
                    out = block_forward(Tensor(teacher.input(block_index, k)), blk,
                                        hooks, None, f"blocks.{block_index}.")
                    vals.append(block_loss(Tensor(teacher.target(block_index, k)),
                                           out).item())
                value = float(np.mean(vals))
                losses[i, j] = value if np.isfinite(value) else np.inf
    finally:
        w.data[:] = original
    return LandscapeGrid(
        alphas=alphas, betas=betas, losses=losses,
        block_index=block_index, config_label=config_label,
        metadata={"channels": [int(c1), int(c2)],
                  "sigma": [sigma1, sigma2], "seed": seed},
    )


def quantizer_report(samples, bits_list) -> list:
    """Per-quantizer/per-bit-width MSE, max error, and clamp fractions.

    ``clamp_fraction`` counts inputs landing on the max code;
    ``interior_clamp_fraction`` counts pre-clamp codes outside the code range
    for inputs strictly inside the sample extremes.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    interior = (x > x.min()) & (x < x.max())
    rows = []
    for bits in bits_list:
        qmax = (1 << bits) - 1
        params = {
            "uniform": calibrate_uniform(x, bits),
            "log2": calibrate_log2(x, bits),
            "sulq": search_eta(x, bits),
        }
        for scheme, p in params.items():
            values, codes = quantize_dequantize(x, p)
            err = np.abs(values.astype(np.float64) - x)
            in_range = unclamped_code_mask(x, p)
            rows.append({
                "quantizer": scheme,
                "bits": bits,
                "mse": float(np.mean(err ** 2)),
                "max_error": float(err.max()),
                "clamp_fraction": float(np.mean(codes == qmax)),
                "interior_clamp_fraction": float(np.mean(~in_range[interior]))
                if interior.any() else 0.0,
            })
    return rows


def write_quantizer_report(rows, path) -> None:
    Path(path).write_text(json.dumps(rows, indent=1, sort_keys=True))
