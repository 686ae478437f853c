"""End-to-end mixed-precision pipeline.

Stages, each reading its inputs from the artifact directory so any of them can
be re-run alone:

``sensitivity``  per-component importance scores       -> sensitivity.json
``frontier``     size/perturbation frontier, selection  -> frontier.csv, frontier.json, selection.json
``patches``      per-patch attention-input bit-widths   -> patch_bits.json
``eval``         quantized vs float evaluation           -> quant_params.json, report.json
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aas, allocator, quant, sensitivity, storage, vit
from .allocator import BitConfig, CostTable, ParetoPoint
from .config import PipelineConfig
from .data import Dataset
from .quant import PASSTHROUGH_BITS, CalibrationStats, QuantContext, QuantParams
from .sensitivity import ImportanceScore
from .vit import MLP, MSA, PATCH_EMBED, HEAD, ComponentId, ViTParams

logger = logging.getLogger(__name__)

STAGES = ("sensitivity", "frontier", "patches", "eval")
MSA_SITES = ("msa_in", "q", "k", "v", "attn", "attn_out")
MLP_SITES = ("mlp_in", "mlp_hidden")
# attention-input sites feed these matrices when scoring per matrix
_MATRIX_PART = {"msa_in": "wq", "q": "wq", "k": "wk", "v": "wv", "attn": "wo", "attn_out": "wo",
                "mlp_in": "w1", "mlp_hidden": "w2"}

SENSITIVITY_JSON = "sensitivity.json"
FRONTIER_CSV = "frontier.csv"
FRONTIER_JSON = "frontier.json"
SELECTION_JSON = "selection.json"
PATCH_JSON = "patch_bits.json"
QPARAMS_JSON = "quant_params.json"
REPORT_JSON = "report.json"
ARTIFACTS = (SENSITIVITY_JSON, FRONTIER_CSV, FRONTIER_JSON, SELECTION_JSON, PATCH_JSON, QPARAMS_JSON, REPORT_JSON)


def site_component(cfg: vit.ViTConfig, layer: int, site: str, granularity: str = "block") -> ComponentId:
    if layer < 0:
        return ComponentId(-1, PATCH_EMBED, "w" if granularity == "matrix" else "")
    if layer >= cfg.depth:
        return ComponentId(cfg.depth, HEAD, "w" if granularity == "matrix" else "")
    kind = MSA if site in MSA_SITES else MLP
    return ComponentId(layer, kind, _MATRIX_PART[site] if granularity == "matrix" else "")


def attention_component(cfg: vit.ViTConfig, layer: int, granularity: str = "block") -> ComponentId:
    return site_component(cfg, layer, "msa_in", granularity)


def activation_stats(params: ViTParams, x, pct: float) -> dict[tuple[int, str], CalibrationStats]:
    rec = quant.ActivationRecorder()
    vit.model_forward(np.asarray(x, dtype=params.dtype), params, rec)
    return {key: quant.collect_stats(vals, pct) for key, vals in rec.records.items()}


@dataclass
class EvalReport:
    accuracy: float
    float_accuracy: float
    logit_mse: float
    agreement: float
    size_bits: int
    omega: float
    patch_average_bits: dict[str, float]
    config: dict
    num_samples: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "float_accuracy": self.float_accuracy,
            "logit_mse": self.logit_mse,
            "agreement": self.agreement,
            "size_bits": self.size_bits,
            "omega": self.omega,
            "patch_average_bits": self.patch_average_bits,
            "num_samples": self.num_samples,
            "config": self.config,
        }


class Pipeline:
    def __init__(self, cfg: PipelineConfig, params: ViTParams, dataset: Dataset):
        self.cfg = cfg
        self.params = params
        self.dataset = dataset
        self.granularity = cfg.search.granularity
        self.census = vit.component_census(params.config, self.granularity)
        self.components = list(self.census)
        if dataset.patches != params.config.patches or dataset.patch_dim != params.config.patch_dim:
            raise ValueError("dataset patch layout does not match the model")

    @cached_property
    def calibration(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.dataset.x_train)
        size = min(self.cfg.calibration.size, n)
        rng = np.random.default_rng(self.cfg.calibration.seed)
        idx = np.sort(rng.choice(n, size=size, replace=False))
        return self.dataset.x_train[idx], self.dataset.y_train[idx]

    @cached_property
    def act_stats(self) -> dict[tuple[int, str], CalibrationStats]:
        return activation_stats(self.params, self.calibration[0], self.cfg.calibration.act_percentile)

    @property
    def table_bits(self) -> list[int]:
        bits = set(self.cfg.search.candidate_bits)
        fixed = self.cfg.quant.fixed_bits
        if fixed is not None and fixed != PASSTHROUGH_BITS:
            bits.add(fixed)
        if self.cfg.quant.act_bits is None:
            bits.update(b for b in range(quant.MIN_BITS, quant.MAX_BITS + 1))
        return sorted(bits)

    @cached_property
    def weight_qparams(self):
        return allocator.calibrate_weights(self.params, self.table_bits, self.granularity,
                                           self.cfg.calibration.weight_percentile)

    # -- step 1 ---------------------------------------------------------------
    def sensitivity(self) -> list[ImportanceScore]:
        x, y = self.calibration
        return sensitivity.gsm_scores(self.params, x, y, self.granularity, self.cfg.search.aggregate)

    # -- step 2 ---------------------------------------------------------------
    def act_bits_for(self, comp: ComponentId, weight_bits: int) -> int:
        if self.cfg.quant.fixed_bits == PASSTHROUGH_BITS:
            return PASSTHROUGH_BITS
        return weight_bits if self.cfg.quant.act_bits is None else self.cfg.quant.act_bits

    def cost_table(self, scores: Sequence[ImportanceScore]) -> CostTable:
        table = allocator.cost_table(self.params, scores, self.weight_qparams, self.granularity)
        if self.cfg.search.activation_omega:
            self._add_activation_omega(table, scores)
        return table

    def _add_activation_omega(self, table: CostTable, scores: Sequence[ImportanceScore]) -> None:
        by_comp = {s.component: s.score for s in scores}
        n = len(self.calibration[0])
        rec = quant.ActivationRecorder()
        vit.model_forward(self.calibration[0], self.params, rec)
        for comp in self.components:
            for b in list(table.omega[comp]):
                ab = self.act_bits_for(comp, b)
                if ab == PASSTHROUGH_BITS:
                    continue
                err = 0.0
                for (layer, site), vals in rec.records.items():
                    if site == "attn" and not self.cfg.quant.quantize_attn:
                        continue
                    if site_component(self.params.config, layer, site, self.granularity) != comp:
                        continue
                    qp = quant.params_from_stats(self.act_stats[(layer, site)], ab, symmetric=False)
                    err += sum(quant.quant_error(v, qp) for v in vals) / n
                table.omega[comp][b] += by_comp[comp] * err

    def budget_bits(self) -> int:
        s = self.cfg.search
        if s.budget_bits is not None:
            return s.budget_bits
        return allocator.uniform_size(self.params, s.budget_uniform_bits, self.granularity)

    def frontier(self, table: CostTable) -> list[ParetoPoint]:
        s = self.cfg.search
        return allocator.pareto_frontier(table, s.candidate_bits, s.alpha, s.beta, s.retain)

    def with_acts(self, weights: dict[ComponentId, int]) -> BitConfig:
        return BitConfig.build(weights, {c: self.act_bits_for(c, b) for c, b in weights.items()})

    def select(self, frontier: Sequence[ParetoPoint], table: CostTable) -> tuple[BitConfig, float]:
        fixed = self.cfg.quant.fixed_bits
        if fixed is not None:
            weights = {c: fixed for c in self.components}
            return self.with_acts(weights), table.perturbation(weights)
        point = allocator.select_config(frontier, self.budget_bits())
        return self.with_acts(point.config.weights), point.omega

    # -- step 3 ---------------------------------------------------------------
    def patch_base_bits(self, config: BitConfig) -> dict[int, int]:
        weights = config.weights
        out = {}
        for l in range(self.params.config.depth):
            if self.cfg.quant.fixed_bits == PASSTHROUGH_BITS:
                out[l] = PASSTHROUGH_BITS
            elif self.cfg.quant.patch_bits is not None:
                out[l] = self.cfg.quant.patch_bits
            else:
                out[l] = weights[attention_component(self.params.config, l, self.granularity)]
        return out

    def patch_params(self, layer: int, bits: Sequence[int]) -> dict[int, QuantParams]:
        stats = self.act_stats[(layer, "msa_in")]
        return {b: quant.params_from_stats(stats, b, symmetric=False)
                for b in sorted(set(bits)) if b != PASSTHROUGH_BITS}

    def quant_context(self, config: BitConfig, assignments: Sequence[aas.PatchBitAssignment]) -> QuantContext:
        weights: dict[str, QuantParams] = {}
        for comp, b in config.weight_bits:
            for m in self.census[comp].matrices:
                weights[m] = QuantParams.identity() if b == PASSTHROUGH_BITS else self.weight_qparams[comp][b][m]
        acts_bits = config.acts
        acts: dict[tuple[int, str], QuantParams] = {}
        for (layer, site), stats in self.act_stats.items():
            if site == "msa_in" or (site == "attn" and not self.cfg.quant.quantize_attn):
                continue
            ab = acts_bits[site_component(self.params.config, layer, site, self.granularity)]
            acts[(layer, site)] = quant.params_from_stats(stats, ab, symmetric=False)
        patch_bits = {a.layer: a.bits for a in assignments}
        patch_params = {a.layer: self.patch_params(a.layer, a.bits) for a in assignments}
        return QuantContext(weights, acts, patch_bits, patch_params, self.cfg.quant.quantize_attn)

    def uniform_assignments(self, config: BitConfig) -> list[aas.PatchBitAssignment]:
        n = self.params.config.patches
        return [aas.PatchBitAssignment(l, k, (k,) * n) for l, k in self.patch_base_bits(config).items()]

    def patch_assignments(self, config: BitConfig) -> list[aas.PatchBitAssignment]:
        uniform = self.uniform_assignments(config)
        if not self.cfg.quant.aas:
            return uniform
        ctx = self.quant_context(config, uniform)
        x = self.calibration[0]
        _, trace = vit.model_forward(x, self.params, ctx)
        out = []
        for l, base in self.patch_base_bits(config).items():
            psv = aas.patch_importance(trace.attn[l], l, self.cfg.quant.importance_mode)
            out.append(aas.assign_patch_bits(psv, base))
        return out

    # -- evaluation -----------------------------------------------------------
    def evaluate(self, config: BitConfig, assignments: Sequence[aas.PatchBitAssignment],
                 omega: float) -> EvalReport:
        x, y = self.dataset.x_test, self.dataset.y_test
        ref = vit.predict(x, self.params)
        ctx = self.quant_context(config, assignments)
        out = vit.predict(x, self.params, ctx)
        return EvalReport(
            accuracy=vit.accuracy(out, y),
            float_accuracy=vit.accuracy(ref, y),
            logit_mse=float(np.mean((out.astype(np.float64) - ref.astype(np.float64)) ** 2)),
            agreement=float(np.mean(np.argmax(out, -1) == np.argmax(ref, -1))),
            size_bits=allocator.model_size(self.params, config, self.granularity),
            omega=omega,
            patch_average_bits={str(a.layer): a.average_bits for a in assignments},
            config=config.to_dict(),
            num_samples=len(x),
        )

    def config_from_dict(self, d: dict) -> BitConfig:
        by_label = {c.label: c for c in self.components}
        missing = set(by_label) - set(d)
        if missing:
            raise ValueError(f"bit config lacks components {sorted(missing)}")
        weights = {by_label[k]: int(d[k]["weight_bits"]) for k in by_label}
        acts = {by_label[k]: int(d[k].get("act_bits", self.act_bits_for(by_label[k], weights[by_label[k]])))
                for k in by_label}
        return BitConfig.build(weights, acts)


# -- persisted stages -----------------------------------------------------------

def _scores_from_json(pipe: Pipeline, rows: list[dict]) -> list[ImportanceScore]:
    by_label = {c.label: c for c in pipe.components}
    if len(rows) != len(by_label) or {r["component"] for r in rows} != set(by_label):
        raise storage.ArtifactError(f"{SENSITIVITY_JSON} does not match the model's components")
    return [ImportanceScore(by_label[r["component"]], float(r["score"]), int(r["num_samples"])) for r in rows]


def stage_sensitivity(pipe: Pipeline, out: Path) -> list[ImportanceScore]:
    scores = pipe.sensitivity()
    storage.write_json(out / SENSITIVITY_JSON, sensitivity.scores_to_json(scores))
    return scores


def stage_frontier(pipe: Pipeline, out: Path) -> dict:
    scores = _scores_from_json(pipe, storage.read_json(out / SENSITIVITY_JSON))
    table = pipe.cost_table(scores)
    front = pipe.frontier(table)
    storage.atomic_write_text(out / FRONTIER_CSV, allocator.frontier_csv(front))
    storage.write_json(out / FRONTIER_JSON, allocator.frontier_json(front))
    config, omega = pipe.select(front, table)
    selection = {
        "budget_bits": None if pipe.cfg.quant.fixed_bits is not None else pipe.budget_bits(),
        "fixed_bits": pipe.cfg.quant.fixed_bits,
        "size_bits": allocator.model_size(pipe.params, config, pipe.granularity),
        "omega": omega,
        "config": config.to_dict(),
    }
    storage.write_json(out / SELECTION_JSON, selection)
    return selection


def stage_patches(pipe: Pipeline, out: Path) -> list[aas.PatchBitAssignment]:
    config = pipe.config_from_dict(storage.read_json(out / SELECTION_JSON)["config"])
    assignments = pipe.patch_assignments(config)
    storage.write_json(out / PATCH_JSON, [a.to_dict() for a in assignments])
    return assignments


def stage_eval(pipe: Pipeline, out: Path) -> EvalReport:
    selection = storage.read_json(out / SELECTION_JSON)
    config = pipe.config_from_dict(selection["config"])
    assignments = [aas.PatchBitAssignment.from_dict(d) for d in storage.read_json(out / PATCH_JSON)]
    ctx = pipe.quant_context(config, assignments)
    storage.write_json(out / QPARAMS_JSON, {
        "weights": {k: v.to_dict() for k, v in ctx.weights.items()},
        "activations": [{"layer": l, "site": s, **qp.to_dict()} for (l, s), qp in ctx.acts.items()],
        "patches": [{"layer": l, "bits": {str(b): qp.to_dict() for b, qp in per.items()}}
                    for l, per in ctx.patch_params.items()],
    })
    report = pipe.evaluate(config, assignments, float(selection["omega"]))
    storage.write_json(out / REPORT_JSON, report.to_dict())
    return report


_STAGE_FNS = {"sensitivity": stage_sensitivity, "frontier": stage_frontier,
              "patches": stage_patches, "eval": stage_eval}


def check_convergence(meta: dict, threshold: float) -> bool:
    norm = meta.get("train", {}).get("final_grad_norm")
    if norm is None or norm > threshold:
        logger.warning(
            "checkpoint gradient norm %s exceeds %s; sensitivity scores assume a converged model",
            norm, threshold,
        )
        return False
    return True


def run(cfg: PipelineConfig, params: ViTParams, dataset: Dataset, out: str | Path,
        stages: Sequence[str] = STAGES) -> EvalReport | None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(cfg, params, dataset)
    report = None
    for name in stages:
        if name not in _STAGE_FNS:
            raise ValueError(f"unknown stage {name!r}; expected one of {STAGES}")
        result = _STAGE_FNS[name](pipe, out)
        if name == "eval":
            report = result
    return report
