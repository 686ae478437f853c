"""Per-component sensitivity scores.

``gsm_scores`` uses the empirical Fisher diagonal built from per-sample
gradients: a parameter's score is ``w**2 * sum_n g_n**2 / (2 N)``.
``hessian_diag_oracle`` estimates the true Hessian diagonal with Rademacher
probes on finite-difference Hessian-vector products, as a slow reference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import vit
from .vit import ComponentId, ViTParams

AGGREGATES = ("sum", "mean", "max")


class OracleError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ImportanceScore:
    component: ComponentId
    score: float
    num_samples: int

    def to_dict(self) -> dict:
        d = self.component.to_dict()
        d.update(score=self.score, num_samples=self.num_samples)
        return d


def _aggregate(values: Iterable[np.ndarray], how: str) -> float:
    flat = np.concatenate([np.ravel(v) for v in values])
    if how == "sum":
        return float(flat.sum())
    if how == "mean":
        return float(flat.mean())
    if how == "max":
        return float(flat.max())
    raise ValueError(f"unknown aggregate {how!r}; expected one of {AGGREGATES}")


def parameter_scores(params: ViTParams, per_sample: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    n = len(per_sample)
    if n == 0:
        raise ValueError("sensitivity scoring needs at least one calibration sample")
    out = {}
    for name, w in params.arrays.items():
        sq = np.zeros(w.shape, dtype=np.float64)
        for grads in per_sample:
            g = grads[name].astype(np.float64)
            sq += g * g
        out[name] = w.astype(np.float64) ** 2 * sq / (2.0 * n)
    return out


def component_scores(params: ViTParams, per_param: Mapping[str, np.ndarray], num_samples: int,
                     granularity: str = "block", aggregate: str = "sum") -> list[ImportanceScore]:
    census = vit.component_census(params.config, granularity)
    return [
        ImportanceScore(cid, _aggregate((per_param[p] for p in spec.params), aggregate), num_samples)
        for cid, spec in census.items()
    ]


def gsm_scores(params: ViTParams, x, labels, granularity: str = "block", aggregate: str = "sum",
               loss_scale: float = 1.0) -> list[ImportanceScore]:
    """Fisher-based importance of every component, in census order."""
    x = np.asarray(x)
    if len(x) == 0:
        raise ValueError("sensitivity scoring needs at least one calibration sample")
    grads = vit.per_sample_gradients(x, labels, params, loss_scale=loss_scale)
    return component_scores(params, parameter_scores(params, grads), len(x), granularity, aggregate)


def rank_components(scores: Sequence[ImportanceScore]) -> list[ImportanceScore]:
    """Descending by score; ties by (layer, kind, part)."""
    if not scores:
        raise ValueError("nothing to rank")
    return sorted(scores, key=lambda s: (-s.score, s.component))


GradFn = Callable[[Mapping[str, np.ndarray]], Mapping[str, np.ndarray]]


def hutchinson_diagonal(grad_fn: GradFn, point: Mapping[str, np.ndarray], probes: int = 64,
                        step: float = 1e-3, seed: int = 0) -> dict[str, np.ndarray]:
    """Estimate diag(H) as the mean of ``z * Hz`` over Rademacher probes ``z``.

    ``Hz`` is a central difference of ``grad_fn`` along ``z``.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    names = list(point)
    base = {k: np.asarray(point[k], dtype=np.float64) for k in names}
    acc = {k: np.zeros_like(v) for k, v in base.items()}
    for _ in range(probes):
        z = {k: rng.choice(np.array([-1.0, 1.0]), size=base[k].shape) for k in names}
        plus = grad_fn({k: base[k] + step * z[k] for k in names})
        minus = grad_fn({k: base[k] - step * z[k] for k in names})
        for k in names:
            hz = (np.asarray(plus[k], dtype=np.float64) - np.asarray(minus[k], dtype=np.float64)) / (2.0 * step)
            acc[k] += z[k] * hz
    return {k: v / probes for k, v in acc.items()}


@dataclass
class HessianResult:
    scores: list[ImportanceScore]
    diagonal: dict[str, np.ndarray]
    seconds: float


def hessian_diag_oracle(params: ViTParams, x, labels, probes: int = 64, step: float = 1e-3,
                        seed: int = 0, granularity: str = "block",
                        aggregate: str = "sum") -> HessianResult:
    """Scores ``H_kk * w_k**2 / 2`` from a Hutchinson estimate of the mean-loss Hessian."""
    start = time.perf_counter()
    p64 = params.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x64) == 0:
        raise ValueError("hessian oracle needs at least one calibration sample")

    def grad_fn(arrays):
        return vit.loss_and_grads(x64, labels, p64.with_arrays(arrays))[1]

    diag = hutchinson_diagonal(grad_fn, p64.arrays, probes=probes, step=step, seed=seed)
    per_param = {k: 0.5 * diag[k] * p64.arrays[k] ** 2 for k in diag}
    scores = component_scores(p64, per_param, len(x64), granularity, aggregate)
    census = vit.component_census(params.config, granularity)
    for s in scores:
        if not np.isfinite(s.score):
            raise OracleError(f"non-finite Hessian estimate for component {s.component.label}")
        bad = [p for p in census[s.component].params if not np.isfinite(diag[p]).all()]
        if bad:
            raise OracleError(f"non-finite Hessian estimate for component {s.component.label} ({bad[0]})")
    return HessianResult(scores, diag, time.perf_counter() - start)


def scores_to_json(scores: Sequence[ImportanceScore]) -> list[dict]:
    return [s.to_dict() for s in scores]
