"""Weight/calibration exporter for the ViT post-training-quantization toolkit."""

from .export import export_calibration, export_model
from .reference import MODEL_REGISTRY, build_reference_model

__version__ = "0.1.0"

__all__ = ["export_calibration", "export_model", "MODEL_REGISTRY",
           "build_reference_model", "__version__"]
