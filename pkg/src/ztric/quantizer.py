"""Post-training quantization of a float MLP into an integer-only model.

Activations live in [0, 255] with zero point 0 (inputs are non-negative KPMs
and every hidden output is post-ReLU). First-layer weights are symmetric in
[-127, 127] with zero point 0 so that the encrypted first layer is a plain
inner product; deeper layers use asymmetric unsigned weights. Biases are
wide integers at scale ``s_in * s_w``. Between layers the accumulator is
rescaled by a fixed-point multiplier, rounded half away from zero and
clamped, which also applies the fused ReLU.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ModelFormatError, ShapeError, TopologyError

Q_MIN, Q_MAX = 0, 255
W1_MAX = 127
# Scale used when a tensor is constant over the calibration set.
MIN_SCALE = float(np.finfo(np.float32).eps)

LINEAR = "linear"
RELU = "relu"                     # linear followed by a separate ReLU op
FUSED_RELU = "fused-linear-relu"  # single op computing max(0, xW + b)
ACTIVATIONS = (LINEAR, RELU, FUSED_RELU)

MODEL_FILE_VERSION = 1


def round_half_away(values):
    """Nearest integer, ties away from zero, elementwise."""
    a = np.asarray(values, dtype=np.float64)
    return np.sign(a) * np.floor(np.abs(a) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not Q_MIN <= self.zero_point <= Q_MAX:
            raise ValueError(f"zero point {self.zero_point} outside [0, 255]")

    def to_dict(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]))


def quantize_value(x: float, qp: QuantParams) -> int:
    """``round(x / scale + zero_point)`` clamped to [0, 255]."""
    q = int(round_half_away(x / qp.scale + qp.zero_point))
    return min(max(q, Q_MIN), Q_MAX)


def quantize_array(x, qp: QuantParams) -> tuple[np.ndarray, int]:
    """Vectorized quantize_value; also returns how many entries were clamped."""
    q = round_half_away(np.asarray(x, dtype=np.float64) / qp.scale + qp.zero_point)
    clamped = int(np.count_nonzero((q < Q_MIN) | (q > Q_MAX)))
    return np.clip(q, Q_MIN, Q_MAX).astype(np.int64), clamped


@dataclass(frozen=True)
class Requant:
    """Real multiplier ``mantissa * 2**-shift`` with a 31-bit normalized mantissa."""

    mantissa: int
    shift: int

    @classmethod
    def from_real(cls, m: float) -> "Requant":
        if not m > 0:
            raise ValueError("requantization multiplier must be positive")
        frac, exp = math.frexp(m)  # m = frac * 2**exp, frac in [0.5, 1)
        mantissa = int(round_half_away(frac * 2**31))
        if mantissa == 2**31:
            mantissa //= 2
            exp += 1
        shift = 31 - exp
        if shift < 1:
            raise ValueError(f"multiplier {m} too large for fixed-point requantization")
        return cls(mantissa, shift)

    @property
    def value(self) -> float:
        return self.mantissa / 2.0**self.shift

    def apply(self, acc: np.ndarray) -> np.ndarray:
        """Integer-only ``round_half_away(acc * multiplier)``."""
        acc = np.asarray(acc, dtype=np.int64)
        if acc.size and int(np.abs(acc).max()) >= 2**31:
            raise OverflowError("accumulator exceeds the 31-bit requantization headroom")
        half = np.int64(1) << np.int64(self.shift - 1)
        mag = (np.abs(acc) * np.int64(self.mantissa) + half) >> np.int64(self.shift)
        return np.sign(acc) * mag

    def to_dict(self) -> dict:
        return {"mantissa": self.mantissa, "shift": self.shift}

    @classmethod
    def from_dict(cls, d: dict) -> "Requant":
        return cls(int(d["mantissa"]), int(d["shift"]))


# -- float model --------------------------------------------------------------

@dataclass
class FloatModel:
    """Dense MLP; ``weights[k]`` has shape (fan_in, fan_out), columns are neurons."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if not self.weights:
            raise TopologyError("model has no layers")
        if not len(self.weights) == len(self.biases) == len(self.activations):
            raise TopologyError("weights, biases and activations differ in length")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} incompatible with bias {b.shape}")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise ShapeError(f"layer {k}: fan-in {w.shape[0]} breaks the dimension chain")
            if act not in ACTIVATIONS:
                raise TopologyError(f"layer {k}: unsupported activation {act!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def is_fused(self) -> bool:
        return RELU not in self.activations

    def forward(self, X) -> np.ndarray:
        """Float logits for a batch (or a single vector)."""
        a = np.asarray(X, dtype=np.float64)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            if act == FUSED_RELU:
                a = np.maximum(a @ w + b, 0.0)
            else:
                a = a @ w + b
                if act == RELU:
                    a = np.maximum(a, 0.0)
        return a

    def predict(self, X) -> np.ndarray:
        return argmax_low(self.forward(np.atleast_2d(X)))

    def layer_outputs(self, X) -> list[tuple[np.ndarray, np.ndarray]]:
        """(layer input, pre-activation output) for every layer."""
        out = []
        a = np.asarray(X, dtype=np.float64)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            out.append((a, z))
            a = z if act == LINEAR else np.maximum(z, 0.0)
        return out

    def to_dict(self) -> list[dict]:
        return [
            {"weight": w.tolist(), "bias": b.tolist(), "activation": act}
            for w, b, act in zip(self.weights, self.biases, self.activations)
        ]

    @classmethod
    def from_dict(cls, layers: list[dict], meta: dict | None = None) -> "FloatModel":
        return cls(
            [np.array(d["weight"], dtype=np.float64) for d in layers],
            [np.array(d["bias"], dtype=np.float64) for d in layers],
            [d["activation"] for d in layers],
            dict(meta or {}),
        )


def argmax_low(logits) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index (np.argmax already does)."""
    return np.argmax(np.atleast_2d(logits), axis=1)


def fuse_linear_relu(model: FloatModel) -> FloatModel:
    """Merge every linear+ReLU pair into one fused layer.

    Interior layers must carry a ReLU; the output layer must be linear.
    """
    acts = list(model.activations)
    if acts[-1] != LINEAR:
        raise TopologyError("output layer must be linear (softmax is a report-only post-step)")
    for k, act in enumerate(acts[:-1]):
        if act == LINEAR:
            raise TopologyError(f"layer {k}: interior layer without ReLU cannot be fused")
    fused = [FUSED_RELU if a == RELU else a for a in acts]
    return FloatModel(
        [w.copy() for w in model.weights],
        [b.copy() for b in model.biases],
        fused,
        dict(model.meta),
    )


# -- calibration ----------------------------------------------------------------

@dataclass
class LayerRange:
    in_min: float
    in_max: float
    pre_min: float
    pre_max: float


@dataclass
class Calibration:
    """Per-layer quantization parameters derived from a calibration set.

    ``outputs[k]`` quantizes the (post-ReLU) output of hidden layer k; the
    final entry describes the logits and is informational only.
    """

    input: QuantParams
    outputs: list[QuantParams]
    ranges: list[LayerRange]
    degenerate: list[str]

    def to_dict(self) -> dict:
        return {
            "input": self.input.to_dict(),
            "outputs": [qp.to_dict() for qp in self.outputs],
            "ranges": [vars(r) for r in self.ranges],
            "degenerate": list(self.degenerate),
        }


def calibrate(model: FloatModel, cal) -> Calibration:
    X = np.atleast_2d(np.asarray(cal, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("calibration set is empty")
    if X.shape[1] != model.dims[0]:
        raise ShapeError(f"calibration samples have length {X.shape[1]}, model expects {model.dims[0]}")
    degenerate = []
    max_abs = float(np.abs(X).max())
    if max_abs == 0.0:
        degenerate.append("input")
        in_qp = QuantParams(MIN_SCALE, 0)
    else:
        in_qp = QuantParams(max_abs / Q_MAX, 0)

    ranges, outputs = [], []
    last = len(model.weights) - 1
    for k, (a, z) in enumerate(model.layer_outputs(X)):
        r = LayerRange(float(a.min()), float(a.max()), float(z.min()), float(z.max()))
        ranges.append(r)
        if r.pre_max == r.pre_min:
            degenerate.append(f"layer{k}")
            outputs.append(QuantParams(MIN_SCALE, 0))
        elif k < last:
            # post-ReLU range is [0, max(pre_max, 0)]
            top = max(r.pre_max, 0.0)
            outputs.append(QuantParams(top / Q_MAX if top > 0 else MIN_SCALE, 0))
            if top <= 0:
                degenerate.append(f"layer{k}")
        else:
            outputs.append(QuantParams(max(abs(r.pre_min), abs(r.pre_max)) / 127, 0))
    return Calibration(in_qp, outputs, ranges, degenerate)


# -- quantized model ------------------------------------------------------------

@dataclass
class QuantizedModel:
    dims: tuple[int, ...]
    q_weights: list[np.ndarray]
    q_biases: list[np.ndarray]
    act_qps: list[QuantParams]      # [network input, hidden output 1, ...]; len == n_layers
    weight_qps: list[QuantParams]   # one per layer
    requant: list[Requant]          # one per hidden layer
    logit_scale: float
    float_model: FloatModel | None = None
    calibration: Calibration | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.q_weights = [np.asarray(w, dtype=np.int64) for w in self.q_weights]
        self.q_biases = [np.asarray(b, dtype=np.int64).reshape(-1) for b in self.q_biases]
        self.validate()

    @property
    def n_layers(self) -> int:
        return len(self.q_weights)

    @property
    def n_params(self) -> int:
        return sum(self.dims[k] * self.dims[k + 1] + self.dims[k + 1] for k in range(self.n_layers))

    @property
    def input_qp(self) -> QuantParams:
        return self.act_qps[0]

    @property
    def first_layer_weights(self) -> np.ndarray:
        return self.q_weights[0]

    def validate(self) -> None:
        L = self.n_layers
        if len(self.dims) != L + 1:
            raise ModelFormatError("dims do not match the number of layers")
        for k in range(L):
            if self.q_weights[k].shape != (self.dims[k], self.dims[k + 1]):
                raise ModelFormatError(f"layer {k}: weight shape {self.q_weights[k].shape} != dims")
            if self.q_biases[k].shape != (self.dims[k + 1],):
                raise ModelFormatError(f"layer {k}: bias shape does not match dims")
        if not (len(self.act_qps) == len(self.weight_qps) == L and len(self.requant) == L - 1):
            raise ModelFormatError("quantization parameter lists have the wrong length")
        if self.weight_qps[0].zero_point != 0:
            raise ModelFormatError("first-layer weight zero point must be 0")
        if np.abs(self.q_weights[0]).max(initial=0) > W1_MAX:
            raise ModelFormatError("first-layer weights must lie in [-127, 127]")
        for k in range(1, L):
            w = self.q_weights[k]
            if w.size and (w.min() < Q_MIN or w.max() > Q_MAX):
                raise ModelFormatError(f"layer {k}: weights must lie in [0, 255]")
        for rq in self.requant:
            if not (2**30 <= rq.mantissa < 2**31 and rq.shift >= 1):
                raise ModelFormatError(f"malformed requantization multiplier {rq}")
        if not self.logit_scale > 0:
            raise ModelFormatError("logit scale must be positive")


def quantize_weights(w: np.ndarray, first: bool) -> tuple[np.ndarray, QuantParams]:
    if first:
        top = float(np.abs(w).max())
        qp = QuantParams(top / W1_MAX if top > 0 else MIN_SCALE, 0)
        q = np.clip(round_half_away(w / qp.scale), -W1_MAX, W1_MAX)
        return q.astype(np.int64), qp
    lo, hi = min(float(w.min()), 0.0), max(float(w.max()), 0.0)
    scale = (hi - lo) / Q_MAX if hi > lo else MIN_SCALE
    zp = int(np.clip(round_half_away(-lo / scale), Q_MIN, Q_MAX))
    qp = QuantParams(scale, zp)
    q = np.clip(round_half_away(w / scale) + zp, Q_MIN, Q_MAX)
    return q.astype(np.int64), qp


def quantize_model(model: FloatModel, cal, calibration: Calibration | None = None) -> QuantizedModel:
    """Quantize a fused float model against calibration samples.

    The network input uses the calibrated input scale. Each hidden output
    scale is then fixed from the integer path's own accumulators over the
    calibration set, so quantization error accumulated upstream can never
    push a calibration sample past 255.
    """
    if not model.is_fused:
        raise TopologyError("apply fuse_linear_relu before quantizing")
    calib = calibration or calibrate(model, cal)
    X = np.atleast_2d(np.asarray(cal, dtype=np.float64))
    L = len(model.weights)
    act_qps = [calib.input]
    a = quantize_array(X, calib.input)[0]
    q_weights, q_biases, weight_qps, requant = [], [], [], []
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        qw, wqp = quantize_weights(w, first=(k == 0))
        acc_scale = act_qps[k].scale * wqp.scale
        qb = round_half_away(b / acc_scale).astype(np.int64)
        q_weights.append(qw)
        weight_qps.append(wqp)
        q_biases.append(qb)
        if k == L - 1:
            break
        acc = dense_accumulate(a, act_qps[k].zero_point, qw, wqp.zero_point, qb)
        top = float(acc.max()) * acc_scale
        if top > 0:
            out_qp = QuantParams(top / Q_MAX, 0)
        else:
            out_qp = calib.outputs[k]
        act_qps.append(out_qp)
        rq = Requant.from_real(acc_scale / out_qp.scale)
        requant.append(rq)
        a, _ = hidden_activation(acc, rq, out_qp)
    logit_scale = act_qps[-1].scale * weight_qps[-1].scale
    return QuantizedModel(
        model.dims, q_weights, q_biases, act_qps, weight_qps, requant, logit_scale,
        float_model=model, calibration=calib,
    )


def dense_accumulate(a: np.ndarray, a_zp: int, q_w: np.ndarray, w_zp: int, q_b: np.ndarray) -> np.ndarray:
    """Wide-integer ``(a - a_zp) @ (q_w - w_zp) + q_b``."""
    return (np.asarray(a, dtype=np.int64) - a_zp) @ (q_w - w_zp) + q_b


def hidden_activation(acc: np.ndarray, rq: Requant, out_qp: QuantParams) -> tuple[np.ndarray, int]:
    """Requantize, then clamp to [zero_point, 255]; the lower clamp is the fused ReLU.

    Returns the activations and the number of upper-range clamps.
    """
    y = rq.apply(acc) + out_qp.zero_point
    clamps = int(np.count_nonzero(y > Q_MAX))
    return np.clip(y, out_qp.zero_point, Q_MAX), clamps


def forward_tail(model: QuantizedModel, acc0: np.ndarray, start: int = 0) -> tuple[np.ndarray, int]:
    """Continue the integer forward pass from layer ``start``'s accumulator.

    Returns the final-layer accumulators (the logits) and the clamp count.
    """
    L = model.n_layers
    acc = acc0
    clamps = 0
    for k in range(start, L - 1):
        a, c = hidden_activation(acc, model.requant[k], model.act_qps[k + 1])
        clamps += c
        acc = dense_accumulate(
            a, model.act_qps[k + 1].zero_point,
            model.q_weights[k + 1], model.weight_qps[k + 1].zero_point, model.q_biases[k + 1],
        )
    return acc, clamps


def quantized_forward_batch(model: QuantizedModel, Xq) -> tuple[np.ndarray, np.ndarray, int]:
    """Integer forward for a batch of [0, 255] inputs: (logits, classes, clamps)."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=np.int64))
    if Xq.shape[1] != model.dims[0]:
        raise ShapeError(f"input length {Xq.shape[1]} != model input {model.dims[0]}")
    if Xq.size and (Xq.min() < Q_MIN or Xq.max() > Q_MAX):
        raise ValueError("quantized inputs must lie in [0, 255]")
    acc0 = dense_accumulate(
        Xq, model.act_qps[0].zero_point, model.q_weights[0], 0, model.q_biases[0]
    )
    logits, clamps = forward_tail(model, acc0)
    return logits, argmax_low(logits), clamps


def quantized_forward(model: QuantizedModel, x_q: Sequence[int]) -> tuple[np.ndarray, int]:
    x = np.asarray(x_q, dtype=np.int64)
    if x.ndim != 1:
        raise ShapeError("quantized_forward takes a single vector")
    logits, classes, _ = quantized_forward_batch(model, x[None, :])
    return logits[0], int(classes[0])


def quantize_inputs(model: QuantizedModel, X) -> np.ndarray:
    return quantize_array(X, model.input_qp)[0]


def predict_float_quantized(model: QuantizedModel, X) -> np.ndarray:
    """Classes from the integer path for raw float KPM windows."""
    return quantized_forward_batch(model, quantize_inputs(model, X))[1]


def softmax(logits) -> np.ndarray:
    """Report-only probabilities; argmax is the contract."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- model file -------------------------------------------------------------------

def model_to_dict(model: QuantizedModel | FloatModel) -> dict:
    if isinstance(model, FloatModel):
        return {
            "version": MODEL_FILE_VERSION,
            "dims": list(model.dims),
            "float_weights": model.to_dict(),
            "meta": model.meta,
        }
    d = {
        "version": MODEL_FILE_VERSION,
        "dims": list(model.dims),
        "float_weights": model.float_model.to_dict() if model.float_model is not None else None,
        "q_weights": [w.tolist() for w in model.q_weights],
        "q_biases": [b.tolist() for b in model.q_biases],
        "quant": [qp.to_dict() for qp in model.act_qps],
        "weight_quant": [qp.to_dict() for qp in model.weight_qps],
        "requant": [rq.to_dict() for rq in model.requant],
        "logit_scale": model.logit_scale,
    }
    if model.float_model is not None:
        d["meta"] = model.float_model.meta
    return d


def model_from_dict(d: dict) -> tuple[FloatModel | None, QuantizedModel | None]:
    """Parse a model file; either part may be absent. Validates every invariant."""
    if d.get("version") != MODEL_FILE_VERSION:
        raise ModelFormatError(f"unsupported model file version {d.get('version')!r}")
    try:
        fm = None
        if d.get("float_weights"):
            fm = FloatModel.from_dict(d["float_weights"], d.get("meta"))
            if list(fm.dims) != list(d["dims"]):
                raise ModelFormatError("float weights do not match dims")
        qm = None
        if d.get("q_weights") is not None:
            qm = QuantizedModel(
                tuple(d["dims"]),
                [np.array(w, dtype=np.int64).reshape(a, b)
                 for w, a, b in zip(d["q_weights"], d["dims"], d["dims"][1:])],
                [np.array(b, dtype=np.int64) for b in d["q_biases"]],
                [QuantParams.from_dict(q) for q in d["quant"]],
                [QuantParams.from_dict(q) for q in d["weight_quant"]],
                [Requant.from_dict(r) for r in d["requant"]],
                float(d["logit_scale"]),
                float_model=fm,
            )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, ShapeError, TopologyError) as exc:
        raise ModelFormatError(f"invalid model file: {exc}") from exc
    if fm is None and qm is None:
        raise ModelFormatError("model file holds neither float nor quantized weights")
    return fm, qm


def save_model(path, model: QuantizedModel | FloatModel) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> tuple[FloatModel | None, QuantizedModel | None]:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not JSON ({exc})") from exc
    return model_from_dict(d)
