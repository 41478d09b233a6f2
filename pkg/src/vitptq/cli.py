"""Pipeline driver: calibrate, optimize, eval, landscape, report, make-toy.

Subcommands communicate through files in the configured output directory, so
each one can run in its own process and the optimize stages are resumable
from any boundary. Exit codes: 0 ok, 1 config error, 2 IO error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .calibration import CalibrationArtifact, CalibrationSet, calibrate_model
from .errors import (
    CalibrationError,
    ConfigurationError,
    ContainerError,
    NumericalError,
    VitPtqError,
)
from .model import Model, QuantHooks, load_checkpoint, save_model
from .sos import (
    QuantState,
    ReconstructionReport,
    SOSConfig,
    TeacherCache,
    block_losses,
    default_iterations,
    materialize_weights,
    run_stage1,
    run_stage2,
    run_stage3,
)
from .tensor import Tensor
from .toy import accuracy, make_toy_bundle, read_dataset

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3

CONFIG_DEFAULTS = {
    "calib_size": 1024,
    "lr": 4e-5,
    "weight_decay": 0.0,
    "batch_size": 64,
    "iterations": None,  # filled from bit width: 200 for 6-bit, 1000 otherwise
    "seed": 0,
    "softmax_quantizer": "sulq",
    "output_dir": "out",
    "eval_data": None,
    "report_bits": [3, 4],
    "landscape": {"block": 0, "grid_points": 21, "span": 0.5,
                  "configs": ["a", "b", "c"]},
}


class RunConfig:
    """Validated view over the JSON run configuration."""

    REQUIRED = ("checkpoint", "calibration_data", "bits_w", "bits_a")

    def __init__(self, doc: dict, overrides: dict):
        merged = dict(CONFIG_DEFAULTS)
        merged.update(doc)
        for key, value in overrides.items():
            if value is not None:
                merged[key] = value
        missing = [k for k in self.REQUIRED if k not in merged]
        if missing:
            raise ConfigurationError(f"config lacks required keys: {missing}")
        self.doc = merged
        for key in ("bits_w", "bits_a"):
            bits = merged[key]
            if not isinstance(bits, int) or not 2 <= bits <= 8:
                raise ConfigurationError(f"{key} must be an integer in [2, 8], got {bits!r}")
        if merged["iterations"] is None:
            six_bit = merged["bits_w"] == 6 and merged["bits_a"] == 6
            merged["iterations"] = default_iterations(6 if six_bit else merged["bits_w"])
        if merged["softmax_quantizer"] not in ("sulq", "log2", "uniform"):
            raise ConfigurationError(
                f"softmax_quantizer must be sulq|log2|uniform, got "
                f"{merged['softmax_quantizer']!r}")
        for key in ("checkpoint", "calibration_data"):
            if not Path(merged[key]).exists():
                raise ConfigurationError(f"{key} path does not exist: {merged[key]}")

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def out_dir(self) -> Path:
        path = Path(self.doc["output_dir"])
        path.mkdir(parents=True, exist_ok=True)
        return path

    def sos_config(self) -> SOSConfig:
        return SOSConfig(
            bits_w=self.doc["bits_w"], bits_a=self.doc["bits_a"],
            lr=float(self.doc["lr"]), weight_decay=float(self.doc["weight_decay"]),
            iterations=int(self.doc["iterations"]),
            batch_size=int(self.doc["batch_size"]), seed=int(self.doc["seed"]),
        )


def load_config(args) -> RunConfig:
    path = Path(args.config)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}")
    overrides = {"seed": args.seed, "output_dir": args.out}
    return RunConfig(doc, overrides)


def load_calibration_set(config: RunConfig) -> CalibrationSet:
    tokens, labels = read_dataset(config["calibration_data"])
    size = int(config["calib_size"])
    if size > len(tokens):
        raise ConfigurationError(
            f"calib_size {size} exceeds dataset of {len(tokens)} samples")
    return CalibrationSet.from_samples(tokens[:size], int(config["batch_size"]),
                                       labels[:size] if labels is not None else None)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# schema validators (structural, used by tests and the artifact readers)

def validate_quant_params_doc(doc: dict) -> None:
    required = {"bits", "scheme", "granularity", "scale", "zero_point"}
    missing = required - doc.keys()
    if missing:
        raise ConfigurationError(f"quant params lack keys: {sorted(missing)}")
    if not isinstance(doc["scale"], list) or not isinstance(doc["zero_point"], list):
        raise ConfigurationError("scale and zero_point must be lists")
    if len(doc["scale"]) != len(doc["zero_point"]):
        raise ConfigurationError("scale and zero_point must have equal length")
    if doc["scheme"] == "sulq" and "eta" not in doc:
        raise ConfigurationError("sulq params need eta")


def validate_calibration_doc(doc: dict) -> None:
    for key in ("bits_a", "bits_w", "seed", "hooks"):
        if key not in doc:
            raise ConfigurationError(f"calibration artifact lacks {key!r}")
    for hook, variants in doc["hooks"].items():
        if not variants:
            raise ConfigurationError(f"hook {hook!r} has no parameter variants")
        for params in variants.values():
            validate_quant_params_doc(params)


def validate_metrics_doc(doc: dict) -> None:
    for key in ("mean_block_loss", "per_block_loss", "blocks"):
        if key not in doc:
            raise ConfigurationError(f"metrics lack {key!r}")
    if len(doc["per_block_loss"]) != doc["blocks"]:
        raise ConfigurationError("per_block_loss length disagrees with block count")


# ---------------------------------------------------------------------------
# subcommands

def cmd_calibrate(args) -> int:
    config = load_config(args)
    model = load_checkpoint(config["checkpoint"])
    calib = load_calibration_set(config)
    artifact = calibrate_model(model, calib, bits_a=config["bits_a"])
    doc = artifact.to_json()
    doc["bits_w"] = config["bits_w"]
    doc["seed"] = int(config["seed"])
    validate_calibration_doc(doc)
    path = config.out_dir / "calibration.json"
    _write_json(path, doc)
    print(f"wrote {path}")
    return EXIT_OK


def _load_artifact(config: RunConfig) -> CalibrationArtifact:
    path = config.out_dir / "calibration.json"
    if not path.exists():
        raise ConfigurationError(f"calibration artifact missing: {path} (run calibrate)")
    doc = json.loads(path.read_text())
    validate_calibration_doc(doc)
    return CalibrationArtifact.from_json(doc)


def _stage_paths(out_dir: Path, stage: int) -> tuple[Path, Path]:
    return (out_dir / f"stage{stage}.ckpt", out_dir / f"stage{stage}.state.json")


def _load_stage_boundary(config: RunConfig, stage: int) -> tuple[Model, QuantState]:
    """Model/state pair to start ``stage`` from, honoring resume semantics."""
    artifact = _load_artifact(config)
    prev_ckpt, prev_state = _stage_paths(config.out_dir, stage - 1)
    if stage > 1 and prev_ckpt.exists() and prev_state.exists():
        return load_checkpoint(prev_ckpt), QuantState.load(prev_state)
    if stage == 1:
        model = load_checkpoint(config["checkpoint"])
        state = QuantState(act_params=artifact.act_params(
            postln_granularity="channel",
            softmax_scheme=config["softmax_quantizer"]))
        return model, state
    if stage == 3:
        # stage-3-only ablation: no reparameterization, straight layer-wise
        model = load_checkpoint(config["checkpoint"])
        state = QuantState(act_params=artifact.act_params(
            postln_granularity="layer",
            softmax_scheme=config["softmax_quantizer"]))
        return model, state
    raise ConfigurationError(
        f"stage {stage} needs stage {stage - 1} outputs in {config.out_dir}")


def cmd_optimize(args) -> int:
    config = load_config(args)
    stages = [1, 2, 3] if args.stages == "all" else [int(args.stages)]
    original = load_checkpoint(config["checkpoint"])
    calib = load_calibration_set(config)
    teacher = TeacherCache.build(original, calib)
    cfg = config.sos_config()

    model: Model | None = None
    state: QuantState | None = None
    report = ReconstructionReport()
    plans = []
    for stage in stages:
        if model is None:
            model, state = _load_stage_boundary(config, stage)
        if stage == 1:
            report.merge(run_stage1(model, teacher, state, cfg))
        elif stage == 2:
            plans = run_stage2(model, state)
        else:
            report.merge(run_stage3(model, teacher, state, cfg))
        ckpt, state_path = _stage_paths(config.out_dir, stage)
        save_model(model, ckpt)
        state.save(state_path)
        print(f"wrote {ckpt}")

    final = config.out_dir / "final.ckpt"
    if stages[-1] == 3:
        materialize_weights(model, state)
        save_model(model, final)
        state.save(config.out_dir / "final.state.json")
        print(f"wrote {final}")
    report_doc = report.to_json()
    report_doc["reparam_plans"] = plans
    report_doc["stages"] = stages
    suffix = "" if args.stages == "all" else f"_stage{stages[0]}"
    _write_json(config.out_dir / f"report{suffix}.json", report_doc)
    print(f"wrote {config.out_dir / ('report' + suffix + '.json')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args)
    model_path = Path(args.model)
    data_path = Path(args.data)
    if not model_path.exists() or not data_path.exists():
        raise FileNotFoundError(f"missing input: {model_path} / {data_path}")
    model = load_checkpoint(model_path)
    teacher_model = load_checkpoint(config["checkpoint"])
    tokens, labels = read_dataset(data_path)
    batches = CalibrationSet.from_samples(tokens, int(config["batch_size"]))
    teacher = TeacherCache.build(teacher_model, batches)

    state_path = model_path.with_suffix(model_path.suffix + ".state.json")
    alt_state = model_path.with_name(model_path.stem + ".state.json")
    hooks = None
    for candidate in (state_path, alt_state):
        if candidate.exists():
            state = QuantState.load(candidate)
            hooks = QuantHooks(state.hook_map(model, bool(state.weight_params)))
            break

    per_block = block_losses(model, teacher, hooks)
    metrics = {
        "blocks": len(per_block),
        "per_block_loss": per_block,
        "mean_block_loss": float(np.mean(per_block)),
        "samples": int(len(tokens)),
    }
    if labels is not None:
        if "head.weight" not in model.extras:
            raise NumericalError("dataset has labels but the model has no head")
        head_classes = model.extras["head.weight"].shape[-1]
        if labels.max() >= head_classes:
            raise NumericalError(
                f"label {labels.max()} out of range for {head_classes}-way head")
        metrics["accuracy"] = accuracy(model, tokens, labels, hooks=hooks,
                                       batch_size=int(config["batch_size"]))
    validate_metrics_doc(metrics)
    path = config.out_dir / "metrics.json"
    _write_json(path, metrics)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_landscape(args) -> int:
    from .diagnostics import probe_landscape

    config = load_config(args)
    spec = dict(CONFIG_DEFAULTS["landscape"])
    spec.update(config["landscape"] if isinstance(config["landscape"], dict) else {})
    model_path = Path(args.model) if args.model else Path(config["checkpoint"])
    model = load_checkpoint(model_path)
    calib = load_calibration_set(config)
    teacher = TeacherCache.build(model, calib)
    artifact = _load_artifact(config)
    for label in spec["configs"]:
        grid = probe_landscape(model, int(spec["block"]), label, artifact, teacher,
                               bits_w=config["bits_w"],
                               grid_points=int(spec["grid_points"]),
                               span=float(spec["span"]), seed=int(config["seed"]))
        base = config.out_dir / f"landscape_{label}_block{spec['block']}"
        grid.write_csv(base.with_suffix(".csv"))
        grid.write_metadata(base.with_suffix(".json"))
        print(f"wrote {base.with_suffix('.csv')}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .diagnostics import quantizer_report, write_quantizer_report
    from .model import StatsHooks, model_forward

    config = load_config(args)
    model = load_checkpoint(config["checkpoint"])
    calib = load_calibration_set(config)
    collected = []
    hooks = StatsHooks(lambda name, arr:
                       collected.append(arr.ravel()) if name.endswith("attn.softmax")
                       else None)
    for batch in calib.batches:
        model_forward(model, Tensor(batch), hooks=hooks)
    samples = np.concatenate(collected)
    rows = quantizer_report(samples, [int(b) for b in config["report_bits"]])
    path = config.out_dir / "quantizer_report.json"
    write_quantizer_report(rows, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    out = Path(args.out or "toy")
    paths = make_toy_bundle(out, seed=args.seed or 0)
    config = {
        "checkpoint": paths["checkpoint"],
        "calibration_data": paths["calibration"],
        "eval_data": paths["eval"],
        "bits_w": 3, "bits_a": 3,
        "calib_size": 32, "batch_size": 8,
        "iterations": 150, "lr": 4e-4,
        "seed": args.seed or 0,
        "output_dir": str(out / "out"),
        "report_bits": [3, 4],
        "landscape": {"block": 0, "grid_points": 11, "span": 0.5,
                      "configs": ["a", "b", "c"]},
    }
    config_path = out / "config.json"
    _write_json(config_path, config)
    print(f"wrote {config_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vitptq",
                     description="Post-training quantization for ViT blocks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="accepted for interface parity; execution is "
                            "single-threaded and deterministic regardless")

    p = sub.add_parser("calibrate", help="compute quantizer parameters")
    common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("optimize", help="run the three-stage optimization")
    common(p)
    p.add_argument("--stages", default="all", choices=["1", "2", "3", "all"])
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", help="block-loss / accuracy metrics")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", help="loss-landscape grids")
    common(p)
    p.add_argument("--model", default=None)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("report", help="quantizer comparison table")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-toy", help="generate the bundled toy fixture")
    p.add_argument("--out", default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ContainerError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, CalibrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except VitPtqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
