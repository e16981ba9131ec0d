"""Layer descriptions and the integer kernels that execute them.

Every weight layer reduces to rows of dot products between weight codes and
zero-point-corrected activation codes ``x^q - o_x``. Those products go
through :mod:`lowacc.batch` under the layer's accumulator config; the
integer sums are then rescaled by ``s_w * s_x`` and requantized.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import batch
from ..accumulate import AccumConfig, Policy
from ..quant import QuantParams, QuantTensor, quantize
from ..report import LayerOverflow

LAYER_KINDS = ("linear", "conv2d", "relu", "flatten")
# products per chunk when materialising dot products
CHUNK_PRODUCTS = 1 << 23


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    w_bits: int = 8
    x_bits: int = 8
    accum: AccumConfig = field(default_factory=AccumConfig)
    prunable: bool = True
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for bits in (self.w_bits, self.x_bits):
            if not 2 <= bits <= 16:
                raise ValueError(f"bitwidths must lie in [2, 16], got {bits}")
        if self.has_weight and (self.in_features < 1 or self.out_features < 1
                                or self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise ValueError(f"invalid dimensions for {self.kind} layer")

    @property
    def has_weight(self) -> bool:
        return self.kind in ("linear", "conv2d")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        """``(out, in)`` for linear, ``(out_ch, in_ch, k, k)`` for conv."""
        if self.kind == "linear":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            return (self.out_features, self.in_features, self.kernel, self.kernel)
        return ()

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape[1:])) if self.has_weight else 0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("kind", "in_features", "out_features", "kernel",
                                           "stride", "padding", "w_bits", "x_bits", "prunable", "name")}
        a = self.accum
        d["accum"] = {"p": a.p, "policy": a.policy.value, "tile": a.tile,
                      "max_rounds": a.max_rounds, "clip": a.clip}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["accum"] = AccumConfig(**d.get("accum", {}))
        return cls(**d)

    def with_accum(self, accum: AccumConfig) -> "LayerSpec":
        return replace(self, accum=accum)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int, padding: int, pad_value=0) -> np.ndarray:
    """Unfold ``(N, C, H, W)`` into ``(N, Ho, Wo, C * k * k)`` patches.

    Patch entries are ordered channel-major then kernel row then column, the
    same order as a flattened ``(C, k, k)`` filter.
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=pad_value)
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kernel * kernel)


def col2im(cols: np.ndarray, x_shape, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto the input grid."""
    n, c, h, w = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    patches = cols.reshape(n, ho, wo, c, kernel, kernel)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _result_is_exact(cfg: AccumConfig) -> bool:
    return cfg.policy is Policy.EXACT or (
        cfg.policy in (Policy.SORTED, Policy.SORTED_TILED) and not cfg.clip)


def integer_dots(xc: np.ndarray, wq: np.ndarray, keep: np.ndarray, cfg: AccumConfig,
                 name: str = "", w_bits: int = 8, x_bits: int = 8, track: bool = True):
    """All dot products between activation rows and weight rows.

    Args:
        xc: ``(R, K)`` zero-point-corrected activation codes.
        wq: ``(O, K)`` weight codes.
        keep: ``(O, K)`` pruning mask; pruned positions are skipped entirely,
            so they do not count as accumulation steps.
        cfg: accumulator config applied to every dot product.
        track: when False and the policy returns exact sums, skip the
            per-product simulation (no overflow counts are produced).

    Returns:
        ``(z, stats)`` with ``z`` of shape ``(R, O)`` and a
        :class:`LayerOverflow`.
    """
    xc = np.asarray(xc, dtype=np.int64)
    wq = np.where(keep, np.asarray(wq, dtype=np.int64), 0)
    n_rows, k = xc.shape
    n_out = wq.shape[0]
    stats = LayerOverflow(name, cfg.label(), cfg.p, w_bits, x_bits, dots=n_rows * n_out)
    # float64 products and sums are exact while |sum| < 2**53
    exact = np.rint(xc.astype(np.float64) @ wq.T.astype(np.float64)).astype(np.int64)
    if _result_is_exact(cfg) and not track:
        return exact, stats

    x_max = int(np.abs(xc).max()) if xc.size else 0
    worst = np.abs(wq).sum(axis=1).max(initial=0) * x_max
    if worst <= (1 << (cfg.p - 1)) - 1:
        # no order of any row can leave the accumulator range
        return exact, stats

    kept = keep.sum(axis=1)
    if kept.size and np.all(kept == kept[0]):
        idx = np.nonzero(keep)[1].reshape(n_out, kept[0])
    else:
        idx = np.broadcast_to(np.arange(k), (n_out, k))
    w_kept = np.take_along_axis(wq, idx, axis=1)
    z = np.empty((n_rows, n_out), dtype=np.int64)
    step = max(1, CHUNK_PRODUCTS // max(idx.size, 1))
    for s in range(0, n_rows, step):
        prods = (xc[s:s + step][:, idx] * w_kept[None]).reshape(-1, idx.shape[1])
        out = batch.run_policy(prods, cfg)
        cls = batch.classify_rows(prods, cfg.p)
        z[s:s + step] = out.result.reshape(-1, n_out)
        stats.transient += int((cls == 1).sum())
        stats.persistent += int((cls == 2).sum())
        stats.events += int(out.events.sum())
    return z, stats


def requantize(z: np.ndarray, in_scale: float, w_scale: float, out: QuantParams) -> QuantTensor:
    return quantize(z.astype(np.float64) * (in_scale * w_scale), out)


def relu_codes(t: QuantTensor) -> QuantTensor:
    return QuantTensor(np.maximum(t.values, t.params.offset), t.params)


def linear_forward(x: QuantTensor, wq: QuantTensor, keep: np.ndarray, spec: LayerSpec,
                   out_params: QuantParams, track: bool = True):
    if wq.params.offset != 0:
        raise ValueError("weight codes must have zero offset")
    if x.shape[-1] != wq.shape[1]:
        raise ValueError(f"shape mismatch: input {x.shape} vs weight {wq.shape}")
    lead = x.shape[:-1]
    xc = x.values.reshape(-1, x.shape[-1]) - x.params.offset
    z, stats = integer_dots(xc, wq.values, keep, spec.accum, spec.name,
                            spec.w_bits, spec.x_bits, track)
    y = requantize(z, x.params.scale, wq.params.scale, out_params)
    return QuantTensor(y.values.reshape(*lead, wq.shape[0]), out_params), stats


def conv2d_forward(x: QuantTensor, wq: QuantTensor, keep: np.ndarray, spec: LayerSpec,
                   out_params: QuantParams, track: bool = True):
    if x.values.ndim != 4 or x.shape[1] != spec.in_features:
        raise ValueError(f"shape mismatch: input {x.shape} for {spec.in_features}-channel conv")
    n, _, h, w = x.shape
    ho = conv_output_size(h, spec.kernel, spec.stride, spec.padding)
    wo = conv_output_size(w, spec.kernel, spec.stride, spec.padding)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    # padding carries the code of real zero
    cols = im2col(x.values, spec.kernel, spec.stride, spec.padding, pad_value=x.params.offset)
    flat = QuantTensor(cols.reshape(n * ho * wo, -1), x.params)
    w2 = QuantTensor(wq.values.reshape(spec.out_features, -1), wq.params)
    y, stats = linear_forward(flat, w2, keep.reshape(spec.out_features, -1), spec,
                              out_params, track)
    out = y.values.reshape(n, ho, wo, spec.out_features).transpose(0, 3, 1, 2)
    return QuantTensor(np.ascontiguousarray(out), out_params), stats
