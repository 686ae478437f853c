"""Mixed-precision bit allocation over a (model size, perturbation) Pareto frontier."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import quant, vit
from .quant import ConfigurationError, QuantParams
from .sensitivity import ImportanceScore
from .vit import ComponentId, ViTParams


class InfeasibleBudget(ValueError):
    def __init__(self, budget: int, minimum: int):
        super().__init__(f"budget {budget} bits is below the smallest frontier point ({minimum} bits)")
        self.budget = budget
        self.minimum = minimum


@dataclass(frozen=True)
class BitConfig:
    """Weight (and activation) bit-width per component, in census order."""

    weight_bits: tuple[tuple[ComponentId, int], ...]
    act_bits: tuple[tuple[ComponentId, int], ...] = ()

    @classmethod
    def build(cls, weights: Mapping[ComponentId, int], acts: Mapping[ComponentId, int] | None = None) -> "BitConfig":
        order = list(weights)
        acts = acts or {}
        return cls(tuple((c, int(weights[c])) for c in order), tuple((c, int(acts[c])) for c in order if c in acts))

    @classmethod
    def uniform(cls, components: Sequence[ComponentId], bits: int, act_bits: int | None = None) -> "BitConfig":
        return cls.build({c: bits for c in components},
                         None if act_bits is None else {c: act_bits for c in components})

    @property
    def weights(self) -> dict[ComponentId, int]:
        return dict(self.weight_bits)

    @property
    def acts(self) -> dict[ComponentId, int]:
        return dict(self.act_bits)

    def vector(self) -> tuple[int, ...]:
        return tuple(b for _, b in self.weight_bits)

    def with_acts(self, acts: Mapping[ComponentId, int]) -> "BitConfig":
        return BitConfig.build(self.weights, acts)

    def to_dict(self) -> dict:
        acts = self.acts
        return {
            c.label: ({"weight_bits": b, "act_bits": acts[c]} if c in acts else {"weight_bits": b})
            for c, b in self.weight_bits
        }


@dataclass(frozen=True)
class ParetoPoint:
    config: BitConfig
    size_bits: int
    omega: float

    @property
    def config_id(self) -> str:
        return "-".join(str(b) for b in self.config.vector())


@dataclass
class CostTable:
    """Per-component parameter counts and perturbation per candidate bit-width."""

    components: list[ComponentId]
    counts: dict[ComponentId, int]
    omega: dict[ComponentId, dict[int, float]] = field(default_factory=dict)

    def size(self, bits: Mapping[ComponentId, int]) -> int:
        return sum(self.counts[c] * int(bits[c]) for c in self.components)

    def perturbation(self, bits: Mapping[ComponentId, int]) -> float:
        total = 0.0
        for c in self.components:
            b = int(bits[c])
            if b == quant.PASSTHROUGH_BITS:
                continue
            try:
                total += self.omega[c][b]
            except KeyError:
                raise ConfigurationError(f"no perturbation calibrated for {c.label} at {b} bits") from None
        return total


WeightParams = Mapping[ComponentId, Mapping[int, Mapping[str, QuantParams]]]


def calibrate_weights(params: ViTParams, bits: Sequence[int], granularity: str = "block",
                      pct: float = 100.0) -> dict[ComponentId, dict[int, dict[str, QuantParams]]]:
    """Symmetric per-matrix params for every (component, bit) pair."""
    census = vit.component_census(params.config, granularity)
    return {
        cid: {b: {m: quant.weight_params(params.arrays[m], b, pct) for m in spec.matrices} for b in bits}
        for cid, spec in census.items()
    }


def component_perturbation(params: ViTParams, matrices: Sequence[str], qps: Mapping[str, QuantParams]) -> float:
    return sum(quant.quant_error(params.arrays[m], qps[m]) for m in matrices)


def perturbation(params: ViTParams, config: BitConfig, weight_qparams: WeightParams,
                 scores: Sequence[ImportanceScore], granularity: str = "block") -> float:
    """Sensitivity-weighted squared weight-quantization error summed over components."""
    census = vit.component_census(params.config, granularity)
    by_comp = {s.component: s.score for s in scores}
    total = 0.0
    for cid, b in config.weight_bits:
        if b == quant.PASSTHROUGH_BITS:
            continue
        try:
            qps = weight_qparams[cid][b]
        except KeyError:
            raise ConfigurationError(f"no quantization params for {cid.label} at {b} bits") from None
        total += by_comp[cid] * component_perturbation(params, census[cid].matrices, qps)
    return total


def model_size(params_or_config, config: BitConfig, granularity: str = "block") -> int:
    """Total weight storage in bits: sum of parameter count times bit-width."""
    cfg = params_or_config.config if isinstance(params_or_config, ViTParams) else params_or_config
    census = vit.component_census(cfg, granularity)
    return sum(vit.weight_count(cfg, census[cid]) * b for cid, b in config.weight_bits)


def cost_table(params: ViTParams, scores: Sequence[ImportanceScore], weight_qparams: WeightParams,
               granularity: str = "block") -> CostTable:
    census = vit.component_census(params.config, granularity)
    by_comp = {s.component: s.score for s in scores}
    table = CostTable(list(census), {c: vit.weight_count(params.config, s) for c, s in census.items()})
    for cid, per_bit in weight_qparams.items():
        table.omega[cid] = {
            b: by_comp[cid] * component_perturbation(params, census[cid].matrices, qps)
            for b, qps in per_bit.items()
        }
    return table


def _group(components: Sequence[ComponentId], alpha: int) -> list[list[ComponentId]]:
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    return [list(components[i:i + alpha]) for i in range(0, len(components), alpha)]


def _prune(cands: list[tuple[int, float, tuple[int, ...]]], beta: int, retain: int):
    sizes = [c[0] for c in cands]
    lo, hi = min(sizes), max(sizes)
    width = (hi - lo) / beta
    buckets: dict[int, list] = {}
    for c in cands:
        idx = 0 if width == 0 else min(int((c[0] - lo) / width), beta - 1)
        buckets.setdefault(idx, []).append(c)
    kept = []
    for idx in sorted(buckets):
        kept.extend(sorted(buckets[idx], key=lambda c: (c[1], c[0], c[2]))[:retain])
    return kept


def non_dominated(cands: Sequence[tuple[int, float, tuple[int, ...]]]):
    """Points no other point beats in one objective without losing in the other.

    Candidates with identical (size, omega) collapse onto the lexicographically
    smallest bit vector, so sizes in the result are strictly increasing.
    """
    ordered = sorted(cands, key=lambda c: (c[0], c[1], c[2]))
    out = []
    best = float("inf")
    for _, group in itertools.groupby(ordered, key=lambda c: c[0]):
        first = next(group)
        if first[1] < best:
            out.append(first)
            best = first[1]
    return out


def pareto_frontier(table: CostTable, candidate_bits: Sequence[int], alpha: int = 2,
                    beta: int | None = 32, retain: int = 3) -> list[ParetoPoint]:
    """Groupwise frontier search.

    Components are split into consecutive groups of ``alpha``.  Each group's
    bit choices extend every surviving partial assignment; the partials are
    then binned into ``beta`` equal-width size intervals and the ``retain``
    lowest-perturbation partials of each interval survive.  ``beta=None``
    disables pruning.  A final dominance sweep removes dominated points.
    """
    bits = sorted(set(int(b) for b in candidate_bits))
    if not bits:
        raise ValueError("candidate bit set is empty")
    if beta is not None and beta < 1:
        raise ValueError("beta must be >= 1")
    if retain < 1:
        raise ValueError("retain must be >= 1")
    for c in table.components:
        missing = [b for b in bits if b not in table.omega.get(c, {})]
        if missing:
            raise ConfigurationError(f"no perturbation calibrated for {c.label} at bits {missing}")

    partial: list[tuple[int, float, tuple[int, ...]]] = [(0, 0.0, ())]
    for group in _group(table.components, alpha):
        grown = []
        for size, omega, vec in partial:
            for choice in itertools.product(bits, repeat=len(group)):
                s, o = size, omega
                for c, b in zip(group, choice):
                    s += table.counts[c] * b
                    o += table.omega[c][b]
                grown.append((s, o, vec + choice))
        partial = grown if beta is None else _prune(grown, beta, retain)

    return [
        ParetoPoint(BitConfig.build(dict(zip(table.components, vec))), size, omega)
        for size, omega, vec in non_dominated(partial)
    ]


def select_config(frontier: Sequence[ParetoPoint], budget_bits: int) -> ParetoPoint:
    """Lowest-perturbation frontier point whose size fits the budget (inclusive)."""
    if not frontier:
        raise ValueError("frontier is empty")
    fits = [p for p in frontier if p.size_bits <= budget_bits]
    if not fits:
        raise InfeasibleBudget(budget_bits, min(p.size_bits for p in frontier))
    return min(fits, key=lambda p: (p.omega, p.size_bits, p.config.vector()))


def frontier_csv(frontier: Sequence[ParetoPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size_bits", "omega", "config_id"])
    for p in frontier:
        w.writerow([p.size_bits, repr(p.omega), p.config_id])
    return buf.getvalue()


def frontier_json(frontier: Sequence[ParetoPoint]) -> dict:
    if frontier:
        comps = [c.label for c, _ in frontier[0].config.weight_bits]
    else:
        comps = []
    return {
        "components": comps,
        "points": [
            {"config_id": p.config_id, "size_bits": p.size_bits, "omega": p.omega,
             "config": p.config.to_dict()}
            for p in frontier
        ],
    }


def uniform_size(params_or_config, bits: int, granularity: str = "block") -> int:
    cfg = params_or_config.config if isinstance(params_or_config, ViTParams) else params_or_config
    comps = list(vit.component_census(cfg, granularity))
    return model_size(cfg, BitConfig.uniform(comps, bits), granularity)


__all__ = [
    "BitConfig", "ParetoPoint", "CostTable", "ConfigurationError", "InfeasibleBudget",
    "calibrate_weights", "perturbation", "model_size", "cost_table", "pareto_frontier",
    "select_config", "non_dominated", "frontier_csv", "frontier_json", "uniform_size",
]
