"""Seeded reference setup: synthetic data, trained float MLP, quantized model.

The t=10 stack (50, 30, 15, 7, 2) is the reference shape. The t=5 and
t=20 stacks scale the first hidden layer to 3/5 of the input so the key
budget (hidden width < input length) still holds.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

from .model_lab import KpmDataset, SynthConfig, TrainConfig, generate_dataset, train_mlp, window_length
from .quantizer import FloatModel, QuantizedModel, fuse_linear_relu, quantize_model

CANONICAL_DIMS = (50, 30, 15, 7, 2)
CANONICAL_PARAMS = 2123
WINDOW_CONFIGS = (5, 10, 20)
DATASET_SIZE = 5000
TEST_SIZE = 1000
CAL_SIZE = 1000


def dims_for_window(t: int) -> tuple[int, ...]:
    l = window_length(t)
    if l == CANONICAL_DIMS[0]:
        return CANONICAL_DIMS
    return (l, (3 * l) // 5, 15, 7, 2)


@dataclass
class Reference:
    t: int
    train: KpmDataset
    test: KpmDataset
    float_model: FloatModel       # as trained (linear + separate ReLU)
    fused: FloatModel
    quantized: QuantizedModel

    @property
    def calibration(self):
        return self.train.X[:CAL_SIZE]


@functools.lru_cache(maxsize=8)
def reference(t: int = 10, seed: int = 42) -> Reference:
    data = generate_dataset(SynthConfig(seed=seed, t=t), DATASET_SIZE)
    train, test = data.split((DATASET_SIZE - TEST_SIZE) / DATASET_SIZE)
    model = train_mlp(train, dims_for_window(t), TrainConfig(seed=seed))
    fused = fuse_linear_relu(model)
    qm = quantize_model(fused, train.X[:CAL_SIZE])
    return Reference(t, train, test, model, fused, qm)
