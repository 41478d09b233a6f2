"""Post-training quantization toolkit for vision-transformer blocks."""

from .calibration import (
    CalibrationArtifact,
    CalibrationSet,
    calibrate_log2,
    calibrate_model,
    calibrate_uniform,
    search_eta,
)
from .container import read_container, write_container
from .model import (
    Model,
    ModelConfig,
    QuantHooks,
    ViTBlock,
    block_forward,
    load_checkpoint,
    mhsa,
    model_forward,
    save_model,
)
from .quantizers import (
    FakeQuantResult,
    QuantParams,
    fake_quant,
    lq_dequant,
    lq_quant,
    shift_infer_dequant,
    sulq_dequant,
    sulq_quant,
    uq_dequant,
    uq_quant,
)
from .reparam import ReparamPlan, apply_plan, build_plan, invert_plan
from .sos import (
    QuantState,
    ReconstructionReport,
    SOSConfig,
    TeacherCache,
    block_loss,
    run_sos,
    run_stage1,
    run_stage2,
    run_stage3,
)
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "CalibrationArtifact", "CalibrationSet", "calibrate_log2", "calibrate_model",
    "calibrate_uniform", "search_eta",
    "read_container", "write_container",
    "Model", "ModelConfig", "QuantHooks", "ViTBlock", "block_forward",
    "load_checkpoint", "mhsa", "model_forward", "save_model",
    "FakeQuantResult", "QuantParams", "fake_quant", "lq_dequant", "lq_quant",
    "shift_infer_dequant", "sulq_dequant", "sulq_quant", "uq_dequant", "uq_quant",
    "ReparamPlan", "apply_plan", "build_plan", "invert_plan",
    "QuantState", "ReconstructionReport", "SOSConfig", "TeacherCache",
    "block_loss", "run_sos", "run_stage1", "run_stage2", "run_stage3",
    "GradTape", "Tensor", "backward",
    "__version__",
]
