"""Quantized models: parameters, calibration state and integer inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..accumulate import AccumConfig
from ..errors import PreconditionError
from ..quant import CalibrationStats, QuantParams, QuantTensor, compute_params, quantize
from ..report import OverflowReport
from ..sparsity import NMSparsePattern, apply_mask
from .layers import LayerSpec, conv2d_forward, linear_forward, relu_codes


@dataclass
class Model:
    """Layer stack with real-valued master weights and activation observers.

    ``act_stats[i]`` observes the tensor entering the ``i``-th weight layer;
    the last entry observes the logits. Each weight layer's integer output is
    requantized straight to the params of the next observation point.
    """

    specs: list[LayerSpec]
    input_shape: tuple[int, ...]
    weights: list[np.ndarray] = field(default_factory=list)
    patterns: list[NMSparsePattern] = field(default_factory=list)
    act_stats: list[CalibrationStats] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        n = len(self.weight_layers)
        if len(self.weights) != n or len(self.patterns) != n:
            raise ValueError("need one weight tensor and one pattern per weight layer")
        if not self.act_stats:
            self.act_stats = [CalibrationStats() for _ in range(n + 1)]
        for spec, w, pat in zip(self.weight_specs, self.weights, self.patterns):
            if w.shape != spec.weight_shape or pat.shape != spec.weight_shape:
                raise ValueError(f"layer {spec.name!r}: weight/mask shape does not match {spec.weight_shape}")
        self._check_shapes()

    @property
    def weight_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.has_weight]

    @property
    def weight_specs(self) -> list[LayerSpec]:
        return [self.specs[i] for i in self.weight_layers]

    @property
    def n_classes(self) -> int:
        return self.weight_specs[-1].out_features

    def _check_shapes(self) -> None:
        shape = self.input_shape
        for spec in self.specs:
            if spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "linear":
                if shape != (spec.in_features,):
                    raise ValueError(f"layer {spec.name!r} expects {spec.in_features} features, gets {shape}")
                shape = (spec.out_features,)
            elif spec.kind == "conv2d":
                if len(shape) != 3 or shape[0] != spec.in_features:
                    raise ValueError(f"layer {spec.name!r} expects {spec.in_features} channels, gets {shape}")
                h = (shape[1] + 2 * spec.padding - spec.kernel) // spec.stride + 1
                w = (shape[2] + 2 * spec.padding - spec.kernel) // spec.stride + 1
                if h < 1 or w < 1:
                    raise ValueError(f"layer {spec.name!r}: kernel larger than input")
                shape = (spec.out_features, h, w)

    def masked_weight(self, i: int) -> np.ndarray:
        return apply_mask(self.weights[i], self.patterns[i])

    def weight_params(self, i: int) -> QuantParams:
        w = self.masked_weight(i)
        return compute_params(float(w.min()), float(w.max()), self.weight_specs[i].w_bits, symmetric=True)

    def quantized_weight(self, i: int) -> QuantTensor:
        return quantize(self.masked_weight(i), self.weight_params(i))

    @property
    def calibrated(self) -> bool:
        return all(s.count > 0 for s in self.act_stats)

    def act_params(self, j: int) -> QuantParams:
        """Params of observation point ``j`` (input of weight layer ``j``, or logits)."""
        specs = self.weight_specs
        bits = specs[j].x_bits if j < len(specs) else specs[-1].x_bits
        return self.act_stats[j].params(bits)

    def sparsity(self) -> float:
        total = sum(p.mask.size for p in self.patterns)
        pruned = sum(int((~p.mask).sum()) for p in self.patterns)
        return pruned / total if total else 0.0

    def with_accum(self, accum: AccumConfig | None) -> "Model":
        """Shallow copy whose weight layers all use ``accum``."""
        if accum is None:
            return self
        specs = [s.with_accum(accum) if s.has_weight else s for s in self.specs]
        return Model(specs, self.input_shape, self.weights, self.patterns, self.act_stats, self.meta)


def forward_model(model: Model, x, accum: AccumConfig | None = None, track: bool = True):
    """Integer inference of a batch of real inputs.

    Returns:
        ``(logits, report)``: dequantized logits of shape ``(N, classes)`` and
        the per-layer overflow report.
    """
    if not model.calibrated:
        raise PreconditionError("model has uncalibrated activation observers")
    m = model.with_accum(accum)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != m.input_shape:
        x = x.reshape(x.shape[0], *m.input_shape)
    h = quantize(x, m.act_params(0))
    report = OverflowReport()
    j = 0
    for spec in m.specs:
        if spec.kind == "relu":
            h = relu_codes(h)
        elif spec.kind == "flatten":
            h = QuantTensor(h.values.reshape(h.shape[0], -1), h.params)
        else:
            fwd = linear_forward if spec.kind == "linear" else conv2d_forward
            wq = m.quantized_weight(j)
            h, stats = fwd(h, wq, m.patterns[j].mask, spec, m.act_params(j + 1), track)
            if not stats.layer:
                stats.layer = spec.name or f"{spec.kind}{j}"
            report.layers.append(stats)
            j += 1
    logits = h.params.scale * (h.values - h.params.offset).astype(np.float64)
    return logits, report


def evaluate(model: Model, images, labels, accum: AccumConfig | None = None,
             batch_size: int = 500, track: bool = True):
    """Top-1 accuracy and aggregated overflow report over a labelled set."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise PreconditionError("empty evaluation set")
    correct = 0
    report = OverflowReport()
    for s in range(0, len(labels), batch_size):
        logits, rep = forward_model(model, images[s:s + batch_size], accum, track)
        correct += int((np.argmax(logits, axis=1) == labels[s:s + batch_size]).sum())
        report.merge(rep)
    return correct / len(labels), report


def _init_weight(spec: LayerSpec, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / spec.fan_in)
    return rng.uniform(-bound, bound, size=spec.weight_shape).astype(np.float32)


def build_model(specs: list[LayerSpec], input_shape, seed: int = 0, m: int = 16) -> Model:
    rng = np.random.default_rng(seed)
    weights, patterns = [], []
    for spec in specs:
        if spec.has_weight:
            weights.append(_init_weight(spec, rng))
            patterns.append(NMSparsePattern.dense(spec.weight_shape, m))
    return Model(list(specs), tuple(input_shape), weights, patterns)


def preset(name: str, w_bits: int = 8, x_bits: int = 8, accum: AccumConfig | None = None,
           hidden: int = 784) -> tuple[list[LayerSpec], tuple[int, ...]]:
    """Layer stacks for the MNIST experiments.

    ``mlp1``: ReLU then a single 784->10 linear layer (the ReLU acts on the
    scaled input, so it is an identity on [0, 1] pixels). ``mlp2``: a hidden
    784->784 linear layer with ReLU and a 784->10 head. ``convnet``: one
    strided 3x3 convolution feeding a linear head.
    """
    accum = accum or AccumConfig()
    kw = dict(w_bits=w_bits, x_bits=x_bits, accum=accum)
    if name == "mlp1":
        return [LayerSpec("relu", name="relu0"),
                LayerSpec("linear", 784, 10, prunable=False, name="fc", **kw)], (784,)
    if name == "mlp2":
        return [LayerSpec("linear", 784, hidden, name="fc1", **kw),
                LayerSpec("relu", name="relu1"),
                LayerSpec("linear", hidden, 10, prunable=False, name="head", **kw)], (784,)
    if name == "convnet":
        return [LayerSpec("conv2d", 1, 8, kernel=3, stride=2, padding=1, prunable=False, name="conv1", **kw),
                LayerSpec("relu", name="relu1"),
                LayerSpec("conv2d", 8, 16, kernel=3, stride=2, padding=1, name="conv2", **kw),
                LayerSpec("relu", name="relu2"),
                LayerSpec("flatten", name="flatten"),
                LayerSpec("linear", 16 * 7 * 7, 10, prunable=False, name="head", **kw)], (1, 28, 28)
    raise ValueError(f"unknown preset {name!r}")
