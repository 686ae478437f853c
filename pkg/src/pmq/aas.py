"""Adaptive Attention Shrink: per-patch bit-widths from attention statistics.

A patch's importance is the attention it receives, averaged over heads and
query patches.  Patches more than one standard deviation above the layer mean
get two extra bits, patches more than one below lose two; the rest keep the
layer's base bit-width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import quant
from .quant import PASSTHROUGH_BITS, QuantParams
from .tensor import Tensor

RECEIVED, LITERAL = "received", "literal"


@dataclass(frozen=True)
class PatchScoreVector:
    layer: int
    scores: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores))


@dataclass(frozen=True)
class PatchBitAssignment:
    layer: int
    base_bits: int
    bits: tuple[int, ...]

    @property
    def average_bits(self) -> float:
        return float(np.mean(self.bits))

    def to_dict(self) -> dict:
        return {"layer": self.layer, "base_bits": self.base_bits, "bits": list(self.bits),
                "average_bits": self.average_bits}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchBitAssignment":
        return cls(int(d["layer"]), int(d["base_bits"]), tuple(int(b) for b in d["bits"]))


def patch_importance(attn, layer: int = 0, mode: str = RECEIVED) -> PatchScoreVector:
    """Score each patch from one layer's attention maps.

    ``attn`` is [H, N, N] (query rows, key columns) or a batch [B, H, N, N],
    which is averaged over the batch first.  ``mode="literal"`` averages rows
    instead of columns; every row of a softmax sums to one, so all patches
    then score exactly ``1/N``.
    """
    a = np.asarray(attn.data if isinstance(attn, Tensor) else attn, dtype=np.float64)
    if a.ndim == 4:
        a = a.mean(axis=0)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError(f"attention must be [H, N, N], got {a.shape}")
    h, n, _ = a.shape
    if n < 2:
        raise ValueError("patch importance needs at least 2 patches")
    if mode == RECEIVED:
        s = a.sum(axis=(0, 1)) / (h * n)
    elif mode == LITERAL:
        s = a.sum(axis=(0, 2)) / (h * n)
    else:
        raise ValueError(f"unknown importance mode {mode!r}")
    return PatchScoreVector(layer, tuple(float(v) for v in s))


def thresholds(psv: PatchScoreVector) -> tuple[float, float]:
    m, v = psv.mean, psv.std
    return m + v, m - v


def assign_patch_bits(psv: PatchScoreVector, base_bits: int) -> PatchBitAssignment:
    if base_bits == PASSTHROUGH_BITS:
        return PatchBitAssignment(psv.layer, base_bits, (PASSTHROUGH_BITS,) * len(psv.scores))
    if not quant.MIN_BITS <= base_bits <= quant.MAX_BITS:
        raise ValueError(f"base bits must be in [{quant.MIN_BITS}, {quant.MAX_BITS}], got {base_bits}")
    m, v = psv.mean, psv.std
    # float noise in equal scores must not read as spread
    if v <= 1e-12 * max(abs(m), 1e-300):
        return PatchBitAssignment(psv.layer, base_bits, (base_bits,) * len(psv.scores))
    hi, lo = m + v, m - v
    up, down = min(base_bits + 2, quant.MAX_BITS), max(base_bits - 2, quant.MIN_BITS)
    bits = tuple(up if s > hi else down if s < lo else base_bits for s in psv.scores)
    return PatchBitAssignment(psv.layer, base_bits, bits)


def apply_patch_quant(x, assignment: PatchBitAssignment, params_by_bits: Mapping[int, QuantParams]) -> np.ndarray:
    """Fake-quantize row ``i`` of ``x`` ([..., N, d]) at ``assignment.bits[i]``."""
    data = x.data if isinstance(x, Tensor) else x
    needed = {b for b in assignment.bits if b != PASSTHROUGH_BITS}
    missing = sorted(needed - set(params_by_bits))
    if missing:
        raise quant.ConfigurationError(f"layer {assignment.layer}: no patch quantization params for bits {missing}")
    return quant.fake_quant_rows(data, assignment.bits, params_by_bits)
