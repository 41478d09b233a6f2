import numpy as np
import pytest

from vitptq.calibration import CalibrationSet, calibrate_model
from vitptq.sos import TeacherCache
from vitptq.toy import build_toy_model, generate_task, train_toy_model


class ToySetup:
    """A trained toy model plus calibration/eval splits and derived artifacts."""

    def __init__(self, seed, *, samples=160, train=96, calib=32, tokens=16, dim=64,
                 heads=4, classes=4, train_iterations=240, batch=8, bits_a=3):
        rng = np.random.default_rng(seed)
        data, labels = generate_task(rng, samples, tokens=tokens, dim=dim,
                                     classes=classes)
        self.model = build_toy_model(rng, depth=2, dim=dim, heads=heads,
                                     tokens=tokens, classes=classes)
        train_toy_model(self.model, data[:train], labels[:train],
                        iterations=train_iterations, seed=seed)
        self.calib_data = data[train:train + calib]
        self.calib_labels = labels[train:train + calib]
        self.eval_data = data[train + calib:]
        self.eval_labels = labels[train + calib:]
        self.calib = CalibrationSet.from_samples(self.calib_data, batch_size=batch)
        self.artifact = calibrate_model(self.model, self.calib, bits_a=bits_a)
        self.teacher = TeacherCache.build(self.model, self.calib)


@pytest.fixture(scope="session")
def toy_small():
    """Fast 2-block model (D=16, H=2, N=6) for module-level optimizer tests."""
    return ToySetup(seed=123, samples=96, train=56, calib=24, tokens=6, dim=16,
                    heads=2, classes=3, train_iterations=120)


@pytest.fixture(scope="session")
def toy_full():
    """The acceptance-scale toy: 2 blocks, D=64, H=4, N=16."""
    return ToySetup(seed=0)
