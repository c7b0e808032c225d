"""SGD training with optional fake quantization, synthetic tasks and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from quantlab.calibration import ScaleRule, quant_params_for
from quantlab.errors import DimensionError, InputError, TrainingDivergedError
from quantlab.nn import (
    LOSSES,
    Activation,
    Mode,
    ModelGraph,
    backward,
    build_mlp,
    forward,
    ste_backward,
)
from quantlab.quantizer import check_bits, fake_quantize, quantize_affine
from quantlab.tensor import make_rng

logger = logging.getLogger(__name__)

TEACHER_HIDDEN = 64
TEACHER_NOISE = 0.01
# Dropout masks use a stream decorrelated from batch sampling.
_DROPOUT_STREAM = 0x9E3779B97F4A7C15


@dataclass
class LabeledSet:
    inputs: np.ndarray  # [n x d] float32
    targets: np.ndarray  # [n x k] float32, or [n] int64 class labels
    task: str = "regression"  # or "classification"
    generated_by: str = ""

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        if self.task == "classification":
            self.targets = np.asarray(self.targets, dtype=np.int64).ravel()
        else:
            self.targets = np.ascontiguousarray(self.targets, dtype=np.float32)
        if len(self.inputs) < 1 or len(self.inputs) != len(self.targets):
            raise InputError(
                f"labeled set needs matching nonempty inputs/targets, got {len(self.inputs)}/{len(self.targets)}"
            )

    def __len__(self):
        return len(self.inputs)

    @property
    def loss_name(self) -> str:
        return "ce" if self.task == "classification" else "mse"

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.inputs[idx], self.targets[idx], self.task, self.generated_by)

    def split(self, n_first: int) -> tuple["LabeledSet", "LabeledSet"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def make_teacher(in_dim: int, out_dim: int, seed: int, hidden: int = TEACHER_HIDDEN) -> ModelGraph:
    return build_mlp([in_dim, hidden, out_dim], seed, dropout=0.0)


def make_synthetic_task(
    kind: str,
    dims: tuple[int, int],
    n: int,
    seed: int,
    noise: float = TEACHER_NOISE,
    separation: float = 10.0,
) -> LabeledSet:
    """Synthetic regression or classification data.

    ``teacher``: Gaussian inputs through a frozen random teacher MLP (seeded
    by ``seed``) plus Gaussian noise of std ``noise``.
    ``blobs``: ``dims[1]`` unit-variance Gaussian clusters whose means sit
    ``separation`` apart.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    in_dim, out_dim = int(dims[0]), int(dims[1])
    rng = make_rng(seed)
    if kind in ("teacher", "TeacherRegression"):
        teacher = make_teacher(in_dim, out_dim, seed)
        x = rng.standard_normal((n, in_dim), dtype=np.float32)
        y, _ = forward(teacher, x, Mode.EVAL)
        if noise > 0:
            y = y + rng.standard_normal(y.shape, dtype=np.float32) * np.float32(noise)
        return LabeledSet(x, y, "regression", f"teacher:seed={seed}")
    if kind in ("blobs", "BlobClassification"):
        k = out_dim
        if in_dim >= k:
            # scaled one-hot means: every pair is exactly `separation` apart
            means = np.zeros((k, in_dim))
            means[np.arange(k), np.arange(k)] = separation / math.sqrt(2.0)
        else:
            means = rng.standard_normal((k, in_dim)) * separation
        labels = rng.integers(0, k, size=n)
        x = means[labels] + rng.standard_normal((n, in_dim))
        return LabeledSet(x.astype(np.float32), labels, "classification", f"blobs:seed={seed}")
    raise InputError(f"unknown task kind {kind!r}; expected teacher or blobs")


@dataclass(frozen=True)
class EvalMetrics:
    loss: float
    accuracy: Optional[float] = None


def evaluate_model(model: ModelGraph, data: LabeledSet, chunk: int = 4096) -> EvalMetrics:
    """Dropout-free loss (and accuracy for classification) over ``data``."""
    if data.inputs.shape[1] != model.input_dim:
        raise DimensionError(f"data input dim {data.inputs.shape[1]} != model input dim {model.input_dim}")
    if data.task == "regression" and data.targets.shape[1:] != (model.output_dim,):
        raise DimensionError(f"target shape {data.targets.shape} does not match model output dim {model.output_dim}")
    loss_fn = LOSSES[data.loss_name]
    n = len(data)
    total, correct = 0.0, 0
    for start in range(0, n, chunk):
        xb = data.inputs[start : start + chunk]
        yb = data.targets[start : start + chunk]
        out, _ = forward(model, xb, Mode.EVAL)
        loss, _ = loss_fn(out, yb)
        if n <= chunk:
            total = loss
        else:
            total += loss * len(xb)
        if data.task == "classification":
            correct += int(np.sum(np.argmax(out, axis=1) == yb))
    if n > chunk:
        total /= n
    acc = correct / n if data.task == "classification" else None
    return EvalMetrics(float(total), acc)


@dataclass(frozen=True)
class FakeQuantConfig:
    bits: int
    scale_rule: ScaleRule = ScaleRule.ALG1
    refresh_every: int = 50
    signed: bool = False

    def __post_init__(self):
        check_bits(self.bits)
        object.__setattr__(self, "scale_rule", ScaleRule(self.scale_rule))
        if self.refresh_every < 1:
            raise InputError("refresh_every must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    max_steps: int = 1000
    seed: int = 0
    fake_quant: Optional[FakeQuantConfig] = None
    loss: Optional[str] = None  # defaults to the data set's natural loss
    conv_eps: Optional[float] = 1e-5  # None disables the convergence stop
    conv_window: int = 200

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InputError("learning rate must be >= 0")
        if self.batch_size < 1 or self.max_steps < 1 or self.conv_window < 1:
            raise InputError("batch_size, max_steps and conv_window must be >= 1")
        if self.loss is not None and self.loss not in LOSSES:
            raise InputError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        fq = self.fake_quant
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_steps": self.max_steps,
            "seed": self.seed,
            "fake_quant": None
            if fq is None
            else {
                "bits": fq.bits,
                "scale_rule": fq.scale_rule.value,
                "refresh_every": fq.refresh_every,
                "signed": fq.signed,
            },
            "loss": self.loss,
            "conv_eps": self.conv_eps,
            "conv_window": self.conv_window,
        }


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    stop_reason: str = "max_steps"

    @property
    def losses(self) -> list:
        return [e["loss"] for e in self.entries]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=False) + "\n" for e in self.entries)


class BatchSampler:
    """Epoch-wise shuffled minibatches drawn from a seeded generator."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def layer_quant_params(model: ModelGraph, fq: FakeQuantConfig) -> list:
    return [quant_params_for(l.dense_weight(), fq.bits, fq.scale_rule, signed=fq.signed) for l in model.layers]


def quantized_copy(model: ModelGraph, params: list) -> ModelGraph:
    """Copy of ``model`` whose weights are stored quantized with ``params``."""
    out = model.copy()
    for layer, p in zip(out.layers, params):
        layer.weight = quantize_affine(layer.weight, p)
    return out


def qat_step_forward(model, xb, params, mode=Mode.TRAIN, rng=None):
    """Forward pass through fake-quantized weights, recording STE masks."""
    fq = [fake_quantize(l.weight, p) for l, p in zip(model.layers, params)]
    out, cache = forward(model, xb, mode, rng, weights=[w for w, _ in fq])
    cache.ste_masks = [m.astype(np.float32) for _, m in fq]
    return out, cache


def train(model: ModelGraph, data: LabeledSet, cfg: TrainConfig) -> tuple[ModelGraph, TrainLog]:
    """Plain SGD on float32 shadow weights; returns a trained copy and its log.

    With ``cfg.fake_quant`` the forward pass uses quantize-dequantized weights
    (parameters refreshed every ``refresh_every`` steps) and gradients follow
    the clipped straight-through estimator.
    """
    if any(l.is_quantized or not isinstance(l.bias, np.ndarray) for l in model.layers):
        raise InputError("training needs float32 weights; dequantize the model first")
    if data.inputs.shape[1] != model.input_dim:
        raise DimensionError(f"data input dim {data.inputs.shape[1]} != model input dim {model.input_dim}")
    model = model.copy()
    loss_fn = LOSSES[cfg.loss or data.loss_name]
    sampler = BatchSampler(len(data), cfg.batch_size, make_rng(cfg.seed))
    drop_rng = make_rng(cfg.seed ^ _DROPOUT_STREAM)
    lr = np.float32(cfg.learning_rate)
    fq = cfg.fake_quant
    params = None
    log = TrainLog()
    losses = []
    # overflow is reported as TrainingDivergedError, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.max_steps):
            idx = sampler.next()
            xb, yb = data.inputs[idx], data.targets[idx]
            refresh = False
            if fq is not None:
                if step % fq.refresh_every == 0:
                    params = layer_quant_params(model, fq)
                    refresh = True
                out, cache = qat_step_forward(model, xb, params, Mode.TRAIN, drop_rng)
            else:
                out, cache = forward(model, xb, Mode.TRAIN, drop_rng)
            loss, grad = loss_fn(out, yb)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at step {step}", step - 1 if step else None)
            grads = ste_backward(model, cache, grad) if fq is not None else backward(model, cache, grad)
            for layer, (dw, db) in zip(model.layers, grads):
                layer.weight -= lr * dw
                layer.bias -= lr * db
            if model.has_nonfinite():
                raise TrainingDivergedError(f"weights became non-finite at step {step}", step)
            losses.append(loss)
            log.entries.append({"step": step, "loss": loss, "lr": cfg.learning_rate, "quant_refresh": refresh})
            if cfg.conv_eps is not None and len(losses) >= 2 * cfg.conv_window:
                w = cfg.conv_window
                if min(losses[:-w]) - min(losses[-w:]) < cfg.conv_eps:
                    log.stop_reason = "converged"
                    break
    return model, log


def fit_linear_probe(data: LabeledSet, steps: int = 300, seed: int = 0, lr: float = 0.1) -> ModelGraph:
    """Single linear layer trained with cross-entropy; used for separability checks."""
    k = int(data.targets.max()) + 1
    probe = build_mlp([data.inputs.shape[1], k], seed, dropout=0.0, activation=Activation.NONE)
    trained, _ = train(probe, data, TrainConfig(learning_rate=lr, batch_size=64, max_steps=steps, seed=seed, conv_eps=None))
    return trained

