"""Uniform fake quantization with percentile calibration.

Weights use symmetric per-tensor quantization, activations asymmetric.  The
sentinel bit-width ``32`` means "leave the tensor alone".
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PASSTHROUGH_BITS = 32
MIN_BITS, MAX_BITS = 2, 8
EPS = 1e-8


class ConfigurationError(KeyError):
    """Quantization parameters were requested that were never calibrated."""


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    symmetric: bool

    def __post_init__(self):
        if self.bits != PASSTHROUGH_BITS and not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}] or {PASSTHROUGH_BITS}, got {self.bits}")
        if not self.scale > 0 or not np.isfinite(self.scale):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.symmetric and self.zero_point != 0:
            raise ValueError("symmetric quantization requires zero_point == 0")
        if not self.symmetric and self.bits != PASSTHROUGH_BITS:
            lo, hi = int_range(self.bits, False)
            if not lo <= self.zero_point <= hi:
                raise ValueError(f"zero_point {self.zero_point} outside [{lo}, {hi}]")

    @property
    def passthrough(self) -> bool:
        return self.bits == PASSTHROUGH_BITS

    @classmethod
    def identity(cls) -> "QuantParams":
        return cls(scale=1.0, zero_point=0, bits=PASSTHROUGH_BITS, symmetric=True)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]), int(d["bits"]), bool(d["symmetric"]))


def int_range(bits: int, symmetric: bool) -> tuple[int, int]:
    if symmetric:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


def quantize(x, qp: QuantParams) -> np.ndarray:
    """Integer codes of ``x``; rounding is half-to-even."""
    x = np.asarray(x, dtype=np.float64)
    if qp.passthrough:
        raise ValueError("the 32-bit passthrough has no integer representation")
    lo, hi = int_range(qp.bits, qp.symmetric)
    q = np.rint(x / qp.scale) + qp.zero_point
    return np.clip(q, lo, hi).astype(np.int64)


def dequantize(xq, qp: QuantParams) -> np.ndarray:
    xq = np.asarray(xq, dtype=np.float64)
    return qp.scale * (xq - qp.zero_point)


def fake_quant(x, qp: QuantParams) -> np.ndarray:
    x = np.asarray(x)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    if qp.passthrough:
        return x.astype(dtype, copy=True)
    return dequantize(quantize(x, qp), qp).astype(dtype)


@dataclass(frozen=True)
class CalibrationStats:
    """Observed range of one tensor over a calibration batch."""

    min: float
    max: float
    pct_low: float
    pct_high: float
    abs_pct: float
    pct: float

    def __post_init__(self):
        if not self.min <= self.pct_low <= self.pct_high <= self.max:
            raise ValueError(f"inconsistent calibration stats {self}")


def collect_stats(samples: Iterable, pct: float) -> CalibrationStats:
    arrays = [np.asarray(s, dtype=np.float64).ravel() for s in samples]
    if not arrays or sum(a.size for a in arrays) == 0:
        raise ValueError("calibration needs at least one nonempty sample")
    if not 50.0 < pct <= 100.0:
        raise ValueError(f"percentile must lie in (50, 100], got {pct}")
    v = np.concatenate(arrays)
    lo, hi = np.percentile(v, [100.0 - pct, pct])
    vmin, vmax = float(v.min()), float(v.max())
    # interpolation can step a hair outside [min, max]
    lo = min(max(float(lo), vmin), vmax)
    hi = min(max(float(hi), lo), vmax)
    return CalibrationStats(
        min=vmin,
        max=vmax,
        pct_low=lo,
        pct_high=hi,
        abs_pct=float(np.percentile(np.abs(v), pct)),
        pct=float(pct),
    )


def params_from_stats(stats: CalibrationStats, bits: int, symmetric: bool) -> QuantParams:
    if bits == PASSTHROUGH_BITS:
        return QuantParams.identity()
    if symmetric:
        qmax = 2 ** (bits - 1) - 1
        return QuantParams(max(stats.abs_pct, EPS) / qmax, 0, bits, True)
    levels = 2**bits - 1
    # the clip range always contains zero so that zero is exactly representable
    lo, hi = min(stats.pct_low, 0.0), max(stats.pct_high, 0.0)
    # floor the range so tiny or subnormal data cannot underflow the scale
    s = max(hi - lo, EPS) / levels
    z = int(np.clip(np.rint(-lo / s), 0, levels))
    return QuantParams(float(s), z, bits, False)


def calibrate_percentile(samples: Sequence, bits: int, symmetric: bool, pct: float) -> QuantParams:
    """Per-tensor quantization parameters from the ``pct`` percentile of ``samples``."""
    return params_from_stats(collect_stats(samples, pct), bits, symmetric)


def weight_params(w, bits: int, pct: float = 100.0) -> QuantParams:
    return calibrate_percentile([w], bits, symmetric=True, pct=pct)


def quant_error(w, qp: QuantParams) -> float:
    """Squared L2 norm of the fake-quantization perturbation."""
    w = np.asarray(w, dtype=np.float64)
    d = fake_quant(w, qp) - w
    return float(np.dot(d.ravel(), d.ravel()))


def fake_quant_rows(x, row_bits: Sequence[int], params_by_bits: Mapping[int, QuantParams]) -> np.ndarray:
    """Fake-quantize each row (axis -2) of ``x`` at its own bit-width."""
    x = np.asarray(x)
    if len(row_bits) != x.shape[-2]:
        raise ValueError(f"{len(row_bits)} row bit-widths for {x.shape[-2]} rows")
    out = np.array(x, copy=True)
    for bits in sorted(set(row_bits)):
        if bits == PASSTHROUGH_BITS:
            continue
        if bits not in params_by_bits:
            raise ConfigurationError(f"no quantization parameters calibrated for {bits} bits")
        rows = [i for i, b in enumerate(row_bits) if b == bits]
        out[..., rows, :] = fake_quant(x[..., rows, :], params_by_bits[bits])
    return out


class QuantContext:
    """Fake-quantization hooks consumed by the model forward pass.

    ``weights`` maps parameter names to their params; ``acts`` maps
    ``(layer, site)`` to activation params.  Layers listed in ``patch_bits``
    quantize the attention input row by row with ``patch_params[layer][bits]``.
    Missing entries pass through unchanged.
    """

    def __init__(
        self,
        weights: Mapping[str, QuantParams] | None = None,
        acts: Mapping[tuple[int, str], QuantParams] | None = None,
        patch_bits: Mapping[int, Sequence[int]] | None = None,
        patch_params: Mapping[int, Mapping[int, QuantParams]] | None = None,
        quantize_attn: bool = False,
    ):
        self.weights = dict(weights or {})
        self.acts = dict(acts or {})
        self.patch_bits = dict(patch_bits or {})
        self.patch_params = dict(patch_params or {})
        self.quantize_attn = quantize_attn

    def weight(self, name: str, w: Tensor) -> Tensor:
        qp = self.weights.get(name)
        if qp is None or qp.passthrough:
            return w
        return T.straight_through(w, lambda a: fake_quant(a, qp))

    def act(self, layer: int, site: str, x: Tensor) -> Tensor:
        qp = self.acts.get((layer, site))
        if qp is None or qp.passthrough:
            return x
        return T.straight_through(x, lambda a: fake_quant(a, qp))

    def msa_input(self, layer: int, x: Tensor) -> Tensor:
        bits = self.patch_bits.get(layer)
        if bits is None:
            return self.act(layer, "msa_in", x)
        qps = self.patch_params.get(layer, {})
        return T.straight_through(x, lambda a: fake_quant_rows(a, bits, qps))


class ActivationRecorder:
    """Pass-through context that keeps every quantizable activation it sees."""

    quantize_attn = True

    def __init__(self):
        self.records: dict[tuple[int, str], list[np.ndarray]] = {}

    def weight(self, name: str, w: Tensor) -> Tensor:
        return w

    def act(self, layer: int, site: str, x: Tensor) -> Tensor:
        self.records.setdefault((layer, site), []).append(np.asarray(x.data))
        return x

    def msa_input(self, layer: int, x: Tensor) -> Tensor:
        return self.act(layer, "msa_in", x)
