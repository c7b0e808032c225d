"""Dense MLP graph with explicit forward and backward passes.

Layers compute ``y = act(x Wᵀ + b)`` on row batches with ``W`` stored
``[out × in]``. Weights (and optionally biases) may be ``QuantizedTensor``;
they are dequantized to float32 before use.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from quantlab.errors import DimensionError, InputError
from quantlab.quantizer import QuantizedTensor, dequantize
from quantlab.tensor import as_tensor, make_rng, matmul

DEFAULT_DROPOUT = 0.1


class Activation(str, enum.Enum):
    NONE = "none"
    RELU = "relu"


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


def _dense(t) -> np.ndarray:
    return dequantize(t) if isinstance(t, QuantizedTensor) else t


@dataclass(eq=False)
class Layer:
    weight: object  # np.ndarray [out x in] or QuantizedTensor
    bias: object  # np.ndarray [out] or QuantizedTensor
    activation: Activation = Activation.RELU
    dropout_rate: float = 0.0
    _dq: tuple = field(default=(None, None), repr=False, compare=False)

    def __post_init__(self):
        self.activation = Activation(self.activation)
        # float32-exact so the container round trip is lossless
        self.dropout_rate = float(np.float32(self.dropout_rate))
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InputError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if not isinstance(self.weight, QuantizedTensor):
            self.weight = as_tensor(self.weight)
        if not isinstance(self.bias, QuantizedTensor):
            self.bias = as_tensor(self.bias)
        if len(self.weight.shape) != 2:
            raise DimensionError(f"weight must be rank 2, got shape {self.weight.shape}")
        if tuple(self.bias.shape) != (self.weight.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def is_quantized(self) -> bool:
        return isinstance(self.weight, QuantizedTensor)

    def dense_weight(self) -> np.ndarray:
        if not isinstance(self.weight, QuantizedTensor):
            return self.weight
        if self._dq[0] is not self.weight:
            self._dq = (self.weight, dequantize(self.weight))
        return self._dq[1]

    def dense_bias(self) -> np.ndarray:
        return _dense(self.bias)


@dataclass(eq=False)
class ModelGraph:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise InputError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(l.weight.shape)) + int(l.bias.shape[0]) for l in self.layers)

    @property
    def weight_count(self) -> int:
        return sum(int(np.prod(l.weight.shape)) for l in self.layers)

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            [
                Layer(
                    l.weight if isinstance(l.weight, QuantizedTensor) else l.weight.copy(),
                    l.bias if isinstance(l.bias, QuantizedTensor) else l.bias.copy(),
                    l.activation,
                    l.dropout_rate,
                )
                for l in self.layers
            ]
        )

    def dense_weights(self) -> list:
        return [l.dense_weight() for l in self.layers]

    def is_linear(self) -> bool:
        return all(l.activation is Activation.NONE for l in self.layers)

    def has_nonfinite(self) -> bool:
        return any(
            not (np.all(np.isfinite(l.dense_weight())) and np.all(np.isfinite(l.dense_bias())))
            for l in self.layers
        )


def build_mlp(
    dims: Sequence[int],
    seed: int,
    dropout: float = DEFAULT_DROPOUT,
    activation: Activation = Activation.RELU,
    weight_std: Optional[float] = None,
) -> ModelGraph:
    """Random MLP with layer widths ``dims``; He-normal init, zero biases.

    Hidden layers use ``activation`` and ``dropout``; the final layer is
    linear without dropout.
    """
    rng = make_rng(seed)
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        std = weight_std if weight_std is not None else float(np.sqrt(2.0 / d_in))
        w = rng.standard_normal((d_out, d_in), dtype=np.float32) * np.float32(std)
        last = i == len(dims) - 2
        layers.append(
            Layer(
                w,
                np.zeros(d_out, dtype=np.float32),
                Activation.NONE if last else activation,
                0.0 if last else dropout,
            )
        )
    return ModelGraph(layers)


# hidden layer count, hidden width
ZOO_SCALES = {
    "small": (10, 1024),
    "medium": (20, 2048),
    "large-desk": (50, 256),
}


def zoo_dims(scale: str, input_dim: Optional[int] = None, output_dim: Optional[int] = None) -> list:
    try:
        depth, width = ZOO_SCALES[scale]
    except KeyError:
        raise InputError(f"unknown scale {scale!r}; expected one of {sorted(ZOO_SCALES)}") from None
    d_in = width if input_dim is None else input_dim
    d_out = width if output_dim is None else output_dim
    return [d_in] + [width] * depth + [d_out]


def build_model_zoo(
    scale: str,
    seed: int,
    input_dim: Optional[int] = None,
    output_dim: Optional[int] = None,
    dropout: float = DEFAULT_DROPOUT,
) -> ModelGraph:
    """Zoo model: ``small`` 10x1024, ``medium`` 20x2048, ``large-desk`` 50x256.

    Input and output widths default to the hidden width.
    """
    return build_mlp(zoo_dims(scale, input_dim, output_dim), seed, dropout)


def mlp_param_count(dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activation
    masks: list = field(default_factory=list)  # scaled dropout masks or None
    outputs: list = field(default_factory=list)  # post-activation, post-dropout
    weights: list = field(default_factory=list)  # dense weights actually used
    ste_masks: Optional[list] = None  # unclamped-element masks under fake quantization
    macs: int = 0


def forward(
    model: ModelGraph,
    batch,
    mode: Mode = Mode.EVAL,
    rng: Optional[np.random.Generator] = None,
    weights: Optional[list] = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the MLP on a ``[batch × in]`` array.

    ``weights`` overrides the layer weights (used for fake quantization).
    Dropout is active only in ``Mode.TRAIN`` and then requires ``rng``.
    """
    x = as_tensor(batch)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(f"input shape {x.shape} does not match model input dim {model.input_dim}")
    mode = Mode(mode)
    if mode is Mode.TRAIN and rng is None and any(l.dropout_rate > 0 for l in model.layers):
        raise InputError("training-mode forward with dropout needs an rng")
    cache = ForwardCache()
    for i, layer in enumerate(model.layers):
        w = layer.dense_weight() if weights is None else as_tensor(weights[i])
        cache.inputs.append(x)
        cache.weights.append(w)
        h = matmul(x, np.ascontiguousarray(w.T)) + layer.dense_bias()
        cache.macs += x.shape[0] * w.shape[0] * w.shape[1]
        cache.pre.append(h)
        if layer.activation is Activation.RELU:
            h = np.maximum(h, np.float32(0.0))
        mask = None
        if mode is Mode.TRAIN and layer.dropout_rate > 0:
            keep = np.float32(1.0 - layer.dropout_rate)
            mask = (rng.random(h.shape, dtype=np.float32) < keep).astype(np.float32) / keep
            h = h * mask
        cache.masks.append(mask)
        cache.outputs.append(h)
        x = h
    return x, cache


def backward(model: ModelGraph, cache: ForwardCache, loss_grad) -> list:
    """Exact gradients ``[(dW, db), ...]`` through the weights used in the forward pass."""
    g = as_tensor(loss_grad)
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
        if layer.activation is Activation.RELU:
            g = g * (cache.pre[i] > 0)
        dw = matmul(np.ascontiguousarray(g.T), cache.inputs[i])
        db = g.sum(axis=0, dtype=np.float32)
        grads[i] = (dw, db)
        if i > 0:
            g = matmul(g, cache.weights[i])
    return grads


def ste_backward(model: ModelGraph, cache: ForwardCache, loss_grad) -> list:
    """Straight-through gradients for a fake-quantized forward pass.

    The quantizer is treated as identity where the code was not clamped and
    as a constant where it was (clipped STE).
    """
    grads = backward(model, cache, loss_grad)
    if cache.ste_masks is None:
        return grads
    return [(dw * m, db) for (dw, db), m in zip(grads, cache.ste_masks)]


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean over all elements of ``(pred − target)²`` and its gradient."""
    pred = as_tensor(pred)
    diff = pred.astype(np.float64) - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size * diff).astype(np.float32)
    return loss, grad


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = float(-np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(np.float32)


LOSSES = {"mse": mse_loss, "ce": cross_entropy_loss}
