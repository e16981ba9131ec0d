"""Uniform per-tensor affine quantization to signed b-bit codes.

A real value ``v`` maps to ``clamp(round(v / scale) + offset, qmin, qmax)``
and a code ``q`` maps back to ``scale * (q - offset)``. Rounding is
half-away-from-zero everywhere so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_BITS = 2
MAX_BITS = 16


def round_half_away(x):
    """Round to nearest, ties away from zero (``np.round`` rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def signed_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def _check_bits(bits: int) -> None:
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bitwidth must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: float
    offset: int = 0

    def __post_init__(self):
        _check_bits(self.bits)
        if not self.scale > 0 or not np.isfinite(self.scale):
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        lo, hi = signed_range(self.bits)
        if not lo <= self.offset <= hi:
            raise ValueError(f"offset {self.offset} outside [{lo}, {hi}]")
        object.__setattr__(self, "bits", int(self.bits))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "offset", int(self.offset))

    @property
    def qmin(self) -> int:
        return signed_range(self.bits)[0]

    @property
    def qmax(self) -> int:
        return signed_range(self.bits)[1]

    def to_dict(self) -> dict:
        return {"bits": self.bits, "scale": self.scale, "offset": self.offset}


@dataclass(frozen=True)
class QuantTensor:
    """Integer codes plus the parameters that give them meaning."""

    values: np.ndarray
    params: QuantParams

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.size and not np.issubdtype(values.dtype, np.integer):
            raise TypeError(f"codes must be integers, got {values.dtype}")
        values = values.astype(np.int64, copy=False)
        if values.size and (values.min() < self.params.qmin or values.max() > self.params.qmax):
            raise ValueError(f"codes outside the {self.params.bits}-bit signed range")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def compute_params(lo: float, hi: float, bits: int, symmetric: bool = False) -> QuantParams:
    """Derive scale and zero-point for the real interval ``[lo, hi]``.

    The interval is widened to contain 0 so that real zero always has an
    exact code. Symmetric params span ``[-a, a]`` with ``a = max(|lo|, |hi|)``
    over ``2**bits - 2`` steps, which leaves ``qmin`` unused and puts zero at
    code 0. A zero-width interval gives ``scale=1, offset=0``.
    """
    _check_bits(bits)
    if hi < lo:
        raise ValueError(f"empty range: max {hi} < min {lo}")
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if symmetric:
        a = max(abs(lo), abs(hi))
        if a == 0.0:
            return QuantParams(bits, 1.0, 0)
        return QuantParams(bits, 2.0 * a / ((1 << bits) - 2), 0)
    if hi == lo:
        return QuantParams(bits, 1.0, 0)
    scale = (hi - lo) / ((1 << bits) - 1)
    offset = -(1 << (bits - 1)) - int(round_half_away(lo / scale))
    qmin, qmax = signed_range(bits)
    return QuantParams(bits, scale, min(max(offset, qmin), qmax))


def quantize(x, params: QuantParams) -> QuantTensor:
    codes = round_half_away(np.asarray(x, dtype=np.float64) / params.scale) + params.offset
    codes = np.clip(codes, params.qmin, params.qmax).astype(np.int64)
    return QuantTensor(codes, params)


def dequantize(t: QuantTensor) -> np.ndarray:
    return t.params.scale * (t.values - t.params.offset).astype(np.float64)


def fake_quantize(x, params: QuantParams) -> np.ndarray:
    """Quantize then dequantize, staying in floating point."""
    return dequantize(quantize(x, params))


@dataclass(frozen=True)
class CalibrationStats:
    """Exponential moving average of per-batch min and max.

    ``decay`` is the weight kept on the running value: 0 tracks the latest
    batch only, values near 1 average over many batches.
    """

    decay: float = 0.99
    lo: float = 0.0
    hi: float = 0.0
    count: int = field(default=0)

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")

    def params(self, bits: int, symmetric: bool = False) -> QuantParams:
        if self.count == 0:
            raise ValueError("no observations recorded")
        return compute_params(self.lo, self.hi, bits, symmetric)


def observe(stats: CalibrationStats, x) -> CalibrationStats:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return stats
    lo, hi = float(x.min()), float(x.max())
    if stats.count:
        d = stats.decay
        lo = d * stats.lo + (1.0 - d) * lo
        hi = d * stats.hi + (1.0 - d) * hi
    return CalibrationStats(stats.decay, lo, hi, stats.count + 1)
