"""Privacy-preserving xApp evaluation.

The first layer is computed from the ciphertext with one functional key
per hidden neuron; everything after it runs on plaintext integers. The
xApp-side model deliberately carries no first-layer weight matrix.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DlogNotFoundError, InferenceError, ShapeError
from .groups import GroupParams
from .ipfe import BsgsTable, Ciphertext, DlogBound, FunctionalKey, decrypt_group_element
from .quantizer import (
    QuantizedModel,
    QuantParams,
    Requant,
    argmax_low,
    dense_accumulate,
    hidden_activation,
)
from .validator import check_key_budget


@dataclass(frozen=True)
class XAppModel:
    """A quantized model minus its first-layer weights.

    Holds the first-layer biases and requantization (needed after the
    encrypted inner products) and every deeper layer in full.
    """

    dims: tuple[int, ...]
    first_bias: np.ndarray
    tail_weights: tuple[np.ndarray, ...]
    tail_biases: tuple[np.ndarray, ...]
    act_qps: tuple[QuantParams, ...]
    tail_weight_qps: tuple[QuantParams, ...]
    requant: tuple[Requant, ...]
    logit_scale: float

    @classmethod
    def from_quantized(cls, qm: QuantizedModel) -> "XAppModel":
        if qm.n_layers < 2:
            raise ShapeError("encrypted inference needs at least one hidden layer")
        return cls(
            qm.dims,
            qm.q_biases[0].copy(),
            tuple(w.copy() for w in qm.q_weights[1:]),
            tuple(b.copy() for b in qm.q_biases[1:]),
            tuple(qm.act_qps),
            tuple(qm.weight_qps[1:]),
            tuple(qm.requant),
            qm.logit_scale,
        )

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "first_bias": self.first_bias.tolist(),
            "tail_weights": [w.tolist() for w in self.tail_weights],
            "tail_biases": [b.tolist() for b in self.tail_biases],
            "quant": [qp.to_dict() for qp in self.act_qps],
            "tail_weight_quant": [qp.to_dict() for qp in self.tail_weight_qps],
            "requant": [rq.to_dict() for rq in self.requant],
            "logit_scale": self.logit_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "XAppModel":
        dims = tuple(d["dims"])
        return cls(
            dims,
            np.array(d["first_bias"], dtype=np.int64),
            tuple(np.array(w, dtype=np.int64).reshape(a, b)
                  for w, a, b in zip(d["tail_weights"], dims[1:], dims[2:])),
            tuple(np.array(b, dtype=np.int64) for b in d["tail_biases"]),
            tuple(QuantParams.from_dict(q) for q in d["quant"]),
            tuple(QuantParams.from_dict(q) for q in d["tail_weight_quant"]),
            tuple(Requant.from_dict(r) for r in d["requant"]),
            float(d["logit_scale"]),
        )

    def forward_from_first(self, acc0: np.ndarray) -> np.ndarray:
        """Integer logits from the first layer's wide accumulators."""
        acc = np.asarray(acc0, dtype=np.int64)
        for k, (w, b, wqp) in enumerate(zip(self.tail_weights, self.tail_biases, self.tail_weight_qps)):
            out_qp = self.act_qps[k + 1]
            a, _ = hidden_activation(acc, self.requant[k], out_qp)
            acc = dense_accumulate(a, out_qp.zero_point, w, wqp.zero_point, b)
        return acc


@dataclass
class InferenceResult:
    cls: int
    logits: np.ndarray
    stage_timings: dict = field(default_factory=dict)  # microseconds

    @property
    def jammer_present(self) -> bool:
        return self.cls == 1


class EncryptedInferenceContext:
    """Functional keys, the xApp model and a shared BSGS table.

    Immutable after construction; evaluate() may be called concurrently.
    """

    def __init__(self, model: XAppModel, keys: list[FunctionalKey], group: GroupParams,
                 bound: DlogBound | None = None):
        l, n = model.dims[0], model.dims[1]
        if len(keys) != n:
            raise ShapeError(f"{len(keys)} functional keys for a first hidden layer of width {n}")
        if any(len(k.w) != l for k in keys):
            raise ShapeError("functional key length does not match the model input")
        budget = check_key_budget(l, n)
        if not budget.passed:
            raise ShapeError(f"key budget violated: {n} keys for {l} inputs")
        self.model = model
        self.keys = tuple(keys)
        self.group = group
        self.bound = bound or DlogBound.for_columns([k.w for k in keys])
        self.table = BsgsTable(group, self.bound)

    @property
    def input_length(self) -> int:
        return self.model.dims[0]

    def first_layer_accumulators(self, ct: Ciphertext) -> np.ndarray:
        """Wide first-layer pre-activations <x, w_i> + b_i, one per functional key."""
        if len(ct.c) != self.input_length:
            raise ShapeError(f"ciphertext length {len(ct.c)} != model input {self.input_length}")
        out = np.empty(len(self.keys), dtype=np.int64)
        for i, fk in enumerate(self.keys):
            try:
                ip = self.table.solve(decrypt_group_element(ct, fk, self.group))
            except DlogNotFoundError as exc:
                raise InferenceError(i, str(exc)) from exc
            out[i] = ip + int(self.model.first_bias[i])
        return out

    def first_layer_from_ciphertext(self, ct: Ciphertext) -> np.ndarray:
        """First hidden activations in [0, 255] (fused ReLU + requantization applied)."""
        acc = self.first_layer_accumulators(ct)
        act, _ = hidden_activation(acc, self.model.requant[0], self.model.act_qps[1])
        return act

    def evaluate(self, ct: Ciphertext) -> InferenceResult:
        t0 = time.perf_counter_ns()
        acc0 = self.first_layer_accumulators(ct)
        t1 = time.perf_counter_ns()
        logits = self.model.forward_from_first(acc0)
        t2 = time.perf_counter_ns()
        return InferenceResult(
            int(argmax_low(logits)[0]),
            logits,
            {"first_layer_us": (t1 - t0) / 1e3, "tail_us": (t2 - t1) / 1e3,
             "eval_us": (t2 - t0) / 1e3},
        )


def build_context(qm: QuantizedModel, keys: list[FunctionalKey], group: GroupParams,
                  bound: DlogBound | None = None) -> EncryptedInferenceContext:
    return EncryptedInferenceContext(XAppModel.from_quantized(qm), keys, group, bound)


def first_layer_from_ciphertext(ctx: EncryptedInferenceContext, ct: Ciphertext) -> np.ndarray:
    return ctx.first_layer_from_ciphertext(ct)


def evaluate_encrypted(ctx: EncryptedInferenceContext, ct: Ciphertext) -> InferenceResult:
    return ctx.evaluate(ct)
