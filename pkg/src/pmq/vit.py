"""Toy vision-transformer encoder (post-norm blocks, mean pooling, no class token)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

# Kinds of quantizable parameter groups, in census order within a layer.
PATCH_EMBED, MSA, MLP, HEAD = "patch_embed", "msa", "mlp", "head"


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 2
    embed_dim: int = 16
    heads: int = 2
    mlp_dim: int = 32
    patches: int = 16
    num_classes: int = 4
    patch_dim: int = 8
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("depth", "embed_dim", "heads", "mlp_dim", "num_classes", "patch_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.patches < 2:
            raise ValueError("patches must be >= 2")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if not self.ln_eps > 0:
            raise ValueError("ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, order=True)
class ComponentId:
    """A quantizable parameter group.

    ``layer`` is -1 for the patch embedding and ``depth`` for the classifier
    head.  ``part`` names a single matrix when scoring at matrix granularity.
    """

    layer: int
    kind: str
    part: str = ""

    @property
    def label(self) -> str:
        if self.kind in (PATCH_EMBED, HEAD):
            base = self.kind
        else:
            base = f"{self.kind}.{self.layer}"
        return f"{base}.{self.part}" if self.part else base

    def to_dict(self) -> dict:
        return {"component": self.label, "kind": self.kind, "layer": self.layer}


@dataclass(frozen=True)
class ComponentSpec:
    params: tuple[str, ...]
    matrices: tuple[str, ...]


def _block(l: int, name: str) -> str:
    return f"blocks.{l}.{name}"


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.embed_dim, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (cfg.patch_dim, d),
        "patch_embed.b": (d,),
        "pos_embed": (cfg.patches, d),
    }
    for l in range(cfg.depth):
        # per-head projections are the d_h-wide column blocks of wq/wk/wv
        shapes.update({
            _block(l, "wq"): (d, d),
            _block(l, "wk"): (d, d),
            _block(l, "wv"): (d, d),
            _block(l, "wo"): (d, d),
            _block(l, "ln.gamma"): (d,),
            _block(l, "ln.beta"): (d,),
            _block(l, "w1"): (d, f),
            _block(l, "b1"): (f,),
            _block(l, "w2"): (f, d),
            _block(l, "b2"): (d,),
        })
    shapes["head.w"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def component_census(cfg: ViTConfig, granularity: str = "block") -> dict[ComponentId, ComponentSpec]:
    """Partition every parameter into exactly one component, in a stable order."""
    if granularity not in ("block", "matrix"):
        raise ValueError(f"unknown granularity {granularity!r}")
    groups: list[tuple[int, str, dict[str, tuple[str, ...]]]] = [
        (-1, PATCH_EMBED, {"w": ("patch_embed.w", "patch_embed.b", "pos_embed")}),
    ]
    for l in range(cfg.depth):
        b = lambda n: _block(l, n)  # noqa: E731
        groups.append((l, MSA, {
            "wq": (b("wq"),),
            "wk": (b("wk"),),
            "wv": (b("wv"),),
            "wo": (b("wo"), b("ln.gamma"), b("ln.beta")),
        }))
        groups.append((l, MLP, {"w1": (b("w1"), b("b1")), "w2": (b("w2"), b("b2"))}))
    groups.append((cfg.depth, HEAD, {"w": ("head.w", "head.b")}))

    census: dict[ComponentId, ComponentSpec] = {}
    for layer, kind, parts in groups:
        if granularity == "block":
            params = tuple(p for names in parts.values() for p in names)
            census[ComponentId(layer, kind)] = ComponentSpec(params, tuple(names[0] for names in parts.values()))
        else:
            for part, names in parts.items():
                census[ComponentId(layer, kind, part)] = ComponentSpec(names, (names[0],))
    return census


def weight_count(cfg: ViTConfig, spec: ComponentSpec) -> int:
    shapes = param_shapes(cfg)
    return sum(math.prod(shapes[m]) for m in spec.matrices)


def quantized_matrices(cfg: ViTConfig) -> list[str]:
    return [m for spec in component_census(cfg).values() for m in spec.matrices]


@dataclass
class ViTParams:
    config: ViTConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.arrays):
            missing = set(shapes) - set(self.arrays)
            extra = set(self.arrays) - set(shapes)
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in shapes.items():
            if self.arrays[name].shape != shape:
                raise T.DimensionError(f"{name}: expected {shape}, got {self.arrays[name].shape}")

    @classmethod
    def init(cls, config: ViTConfig, rng: np.random.Generator, std: float = 0.02,
             dtype=np.float32) -> "ViTParams":
        arrays = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                arrays[name] = np.ones(shape, dtype=dtype)
            elif leaf in ("b", "b1", "b2", "beta"):
                arrays[name] = np.zeros(shape, dtype=dtype)
            else:
                arrays[name] = (std * _truncated_normal(rng, shape)).astype(dtype)
        return cls(config, arrays)

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def names(self) -> list[str]:
        return list(param_shapes(self.config))

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def astype(self, dtype) -> "ViTParams":
        return ViTParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "ViTParams":
        return ViTParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def with_arrays(self, updates: Mapping[str, np.ndarray]) -> "ViTParams":
        arrays = dict(self.arrays)
        arrays.update(updates)
        return ViTParams(self.config, arrays)

    def leaves(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}


def _truncated_normal(rng: np.random.Generator, shape, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray] = field(default_factory=list)
    attn: list[np.ndarray] = field(default_factory=list)
    msa_out: list[np.ndarray] = field(default_factory=list)
    z: list[np.ndarray] = field(default_factory=list)
    out: list[np.ndarray] = field(default_factory=list)
    logits: np.ndarray | None = None


def _weights(params) -> tuple[ViTConfig, Mapping[str, Tensor]]:
    if isinstance(params, ViTParams):
        return params.config, params.leaves()
    cfg, w = params
    return cfg, w


def _q_weight(ctx, name: str, w: Tensor) -> Tensor:
    return w if ctx is None else ctx.weight(name, w)


def _q_act(ctx, layer: int, site: str, x: Tensor) -> Tensor:
    return x if ctx is None else ctx.act(layer, site, x)


def msa_forward(x, layer: int, params, quant_ctx=None, trace: ForwardTrace | None = None) -> Tensor:
    """Multi-head self-attention over the last two axes of ``x`` ([..., N, d])."""
    cfg, w = _weights(params)
    x = T.tensor(x)
    n, d = x.shape[-2], x.shape[-1]
    if d != cfg.embed_dim:
        raise T.DimensionError(f"msa input width {d} != embed_dim {cfg.embed_dim}")
    lead = x.shape[:-2]
    h, dh = cfg.heads, cfg.head_dim
    wq = _q_weight(quant_ctx, _block(layer, "wq"), w[_block(layer, "wq")])
    wk = _q_weight(quant_ctx, _block(layer, "wk"), w[_block(layer, "wk")])
    wv = _q_weight(quant_ctx, _block(layer, "wv"), w[_block(layer, "wv")])
    wo = _q_weight(quant_ctx, _block(layer, "wo"), w[_block(layer, "wo")])
    if quant_ctx is not None:
        x = quant_ctx.msa_input(layer, x)

    def split(t: Tensor) -> Tensor:
        return T.swapaxes(T.reshape(t, lead + (n, h, dh)), -3, -2)

    q = split(_q_act(quant_ctx, layer, "q", x @ wq))
    k = split(_q_act(quant_ctx, layer, "k", x @ wk))
    v = split(_q_act(quant_ctx, layer, "v", x @ wv))
    logits = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))
    attn = T.softmax_rows(logits)
    if trace is not None:
        trace.attn.append(attn.data)
    if quant_ctx is not None and quant_ctx.quantize_attn:
        attn = quant_ctx.act(layer, "attn", attn)
    ctx_heads = attn @ v
    concat = T.reshape(T.swapaxes(ctx_heads, -3, -2), lead + (n, d))
    concat = _q_act(quant_ctx, layer, "attn_out", concat)
    return concat @ wo


def block_forward(x, layer: int, params, quant_ctx=None, trace: ForwardTrace | None = None) -> Tensor:
    cfg, w = _weights(params)
    x = T.tensor(x)
    if trace is not None:
        trace.inputs.append(x.data)
    m = msa_forward(x, layer, (cfg, w), quant_ctx, trace)
    z = T.layernorm(m + x, w[_block(layer, "ln.gamma")], w[_block(layer, "ln.beta")], cfg.ln_eps)
    w1 = _q_weight(quant_ctx, _block(layer, "w1"), w[_block(layer, "w1")])
    w2 = _q_weight(quant_ctx, _block(layer, "w2"), w[_block(layer, "w2")])
    hidden = T.gelu(_q_act(quant_ctx, layer, "mlp_in", z) @ w1 + w[_block(layer, "b1")])
    mlp = _q_act(quant_ctx, layer, "mlp_hidden", hidden) @ w2 + w[_block(layer, "b2")]
    out = mlp + z
    if trace is not None:
        trace.msa_out.append(m.data)
        trace.z.append(z.data)
        trace.out.append(out.data)
    return out


def model_forward(x, params, quant_ctx=None) -> tuple[Tensor, ForwardTrace]:
    """Logits for a batch of patch sequences [B, N, patch_dim]."""
    cfg, w = _weights(params)
    x = T.tensor(x)
    if x.ndim != 3 or x.shape[1:] != (cfg.patches, cfg.patch_dim):
        raise T.DimensionError(
            f"expected input [B, {cfg.patches}, {cfg.patch_dim}], got {list(x.shape)}"
        )
    trace = ForwardTrace()
    pe = _q_weight(quant_ctx, "patch_embed.w", w["patch_embed.w"])
    h = _q_act(quant_ctx, -1, "embed_in", x) @ pe + w["patch_embed.b"] + w["pos_embed"]
    for l in range(cfg.depth):
        h = block_forward(h, l, (cfg, w), quant_ctx, trace)
    pooled = _q_act(quant_ctx, cfg.depth, "head_in", T.mean(h, axis=1))
    logits = pooled @ _q_weight(quant_ctx, "head.w", w["head.w"]) + w["head.b"]
    trace.logits = logits.data
    return logits, trace


def predict(x, params: ViTParams, quant_ctx=None, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=params.dtype)
    leaves = params.leaves()
    chunks = [
        model_forward(x[i:i + batch_size], (params.config, leaves), quant_ctx)[0].data
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def loss_and_grads(x, labels, params: ViTParams, reduction: str = "mean",
                   loss_scale: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    leaves = params.leaves(requires_grad=True)
    logits, _ = model_forward(np.asarray(x, dtype=params.dtype), (params.config, leaves))
    loss = T.cross_entropy(logits, labels, reduction=reduction)
    if loss_scale != 1.0:
        loss = T.scale(loss, loss_scale)
    return loss.item(), T.backward(loss, leaves)


def _check_labels(labels, cfg: ViTConfig) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise ValueError(f"labels must lie in [0, {cfg.num_classes})")
    return labels


def per_sample_gradients(x, labels, params: ViTParams, loss_scale: float = 1.0) -> list[dict[str, np.ndarray]]:
    """One gradient set of the per-sample cross-entropy for every sample in the batch."""
    labels = _check_labels(labels, params.config)
    x = np.asarray(x, dtype=params.dtype)
    if len(x) != len(labels):
        raise ValueError(f"{len(x)} inputs but {len(labels)} labels")
    out = []
    for i in range(len(x)):
        _, g = loss_and_grads(x[i:i + 1], labels[i:i + 1], params, reduction="sum", loss_scale=loss_scale)
        out.append(g)
    return out


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_valid: ViTParams):
        super().__init__(message)
        self.last_valid = last_valid


@dataclass
class TrainResult:
    params: ViTParams
    epoch_losses: list[float]
    step_losses: list[float]
    initial_loss: float
    final_loss: float
    final_grad_norm: float
    train_accuracy: float

    def metadata(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "final_grad_norm": self.final_grad_norm,
            "train_accuracy": self.train_accuracy,
        }


def full_loss(x, labels, params: ViTParams) -> tuple[float, float]:
    """Mean loss and gradient norm over the whole set."""
    loss, grads = loss_and_grads(x, labels, params)
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    return loss, norm


def accuracy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def train_toy(params: ViTParams, x, labels, epochs: int, lr: float, batch_size: int = 32,
              momentum: float = 0.9, seed: int = 0, clip_norm: float | None = 1.0,
              schedule: str = "cosine") -> TrainResult:
    """Minibatch SGD with momentum on mean cross-entropy.

    Step gradients are rescaled to global norm ``clip_norm`` when larger.
    ``schedule="cosine"`` anneals the learning rate to zero over the run so the
    final parameters settle near a minimum; ``"constant"`` keeps ``lr``.
    """
    if schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown schedule {schedule!r}")
    labels = _check_labels(labels, params.config)
    x = np.asarray(x, dtype=params.dtype)
    rng = np.random.default_rng(seed)
    current = params.copy()
    velocity = {k: np.zeros_like(v) for k, v in current.arrays.items()}
    initial_loss, _ = full_loss(x, labels, current)
    epoch_losses: list[float] = []
    step_losses: list[float] = []
    steps_per_epoch = -(-len(x) // batch_size)
    total_steps = max(epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grads(x[idx], labels[idx], current)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", current)
            if clip_norm is not None:
                norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
                if norm > clip_norm:
                    grads = {k: g * np.asarray(clip_norm / norm, dtype=g.dtype) for k, g in grads.items()}
            rate = lr if schedule == "constant" else 0.5 * lr * (1.0 + math.cos(math.pi * step / total_steps))
            step += 1
            arrays = {}
            for k, g in grads.items():
                velocity[k] = momentum * velocity[k] + g
                arrays[k] = current.arrays[k] - np.asarray(rate, dtype=g.dtype) * velocity[k]
            candidate = ViTParams(current.config, arrays)
            if not all(np.isfinite(a).all() for a in arrays.values()):
                raise TrainingError(f"parameters diverged at epoch {epoch}", current)
            current = candidate
            step_losses.append(loss)
            total += loss * len(idx)
        epoch_losses.append(total / len(x))
        logger.debug("epoch %d loss %.5f", epoch, epoch_losses[-1])
    final_loss, grad_norm = full_loss(x, labels, current)
    acc = accuracy(predict(x, current), labels)
    return TrainResult(current, epoch_losses, step_losses, initial_loss, final_loss, grad_norm, acc)
