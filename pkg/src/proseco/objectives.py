"""Training objectives: the masked-denoising bound, the self-correction term,
and the combined step that optimizes both with one AdamW update.

Sign convention, fixed once for every module: the bound is written with
negative weights multiplying log-probabilities; here we minimize the
equivalent positive quantity ``loss_weight(t) * sum(-log p)``. Logs are
clamped below at log(1e-12).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import (
    InvalidInputError,
    NoiseSchedule,
    NumericError,
    Rng,
    Vocabulary,
    loss_weight,
    sample_time,
)
from .denoiser import (
    Denoiser,
    DenoiserOutput,
    apply_copy_over,
    argmax_decode,
    compute_gradients,
)
from .diffusion import NoisyLatent, corrupt

__all__ = [
    "LOG_FLOOR",
    "TrainConfig",
    "LossBreakdown",
    "TrainState",
    "mdm_loss",
    "self_correction_loss",
    "build_corrector_input",
    "learning_rate",
    "OptimizerState",
    "optimizer_update",
    "train_step",
]

LOG_FLOOR = math.log(1e-12)


@dataclass
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 1000
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    decay: str = "cosine"  # or "constant"
    min_lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float | None = None
    min_t: float = 0.1
    lambda_mode: str = "schedule_weight"  # or "constant"
    lambda_const: float = 1.0
    weight_tying: bool = True
    corrector_loss_enabled: bool = True

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise InvalidInputError("peak learning rate must be positive")
        if self.warmup_steps < 0:
            raise InvalidInputError("warmup steps must be >= 0")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise InvalidInputError("betas must lie in (0, 1)")
        if self.decay not in ("cosine", "constant"):
            raise InvalidInputError(f"unknown decay kind {self.decay!r}")
        if self.lambda_mode not in ("schedule_weight", "constant"):
            raise InvalidInputError(f"unknown lambda mode {self.lambda_mode!r}")


@dataclass
class LossBreakdown:
    mdm_loss: float
    sc_loss: float
    total: float
    t_used: float
    masked_fraction: float


def _sc_weight(cfg_mode: str, const: float, schedule: NoiseSchedule, t: float) -> float:
    if cfg_mode == "schedule_weight":
        return loss_weight(schedule, t)
    return const


def mdm_loss(
    output: DenoiserOutput,
    x: np.ndarray,
    z_t: NoisyLatent,
    t: float,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
) -> float:
    """Weighted cross-entropy over the masked, non-pad positions only."""
    x = np.asarray(x)
    z = np.asarray(z_t.tokens)
    if x.shape != z.shape or output.probs.shape[:-1] != x.shape:
        raise InvalidInputError("clean sequence, latent, and output lengths disagree")
    sel = (z == vocab.mask_id) & (x != vocab.pad_id)
    if not np.any(sel):
        return 0.0
    picked = output.probs[sel, x[sel]]
    nll = -np.log(np.maximum(picked, 1e-12))
    return float(loss_weight(schedule, t) * nll.sum())


def self_correction_loss(
    corr_output: DenoiserOutput,
    x: np.ndarray,
    t: float,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    lambda_mode: str = "schedule_weight",
    lambda_const: float = 1.0,
) -> float:
    """Weighted cross-entropy over every non-pad position (no mask gating)."""
    x = np.asarray(x)
    if corr_output.probs.shape[:-1] != x.shape:
        raise InvalidInputError("clean sequence and corrector output lengths disagree")
    sel = x != vocab.pad_id
    picked = corr_output.probs[sel, x[sel]]
    nll = -np.log(np.maximum(picked, 1e-12))
    w = _sc_weight(lambda_mode, lambda_const, schedule, t)
    return float(w * nll.sum())


def build_corrector_input(output: DenoiserOutput) -> np.ndarray:
    """Greedy decode of the denoiser output, detached from the graph.

    The result is integer-valued, so no gradient can flow through it into
    the pass that produced ``output`` (the stop-gradient barrier).
    """
    return argmax_decode(output)


def _weighted_nll_graph(logp: ad.Tensor, targets: np.ndarray, weights: np.ndarray) -> ad.Tensor:
    picked = ad.gather_last(logp, targets)
    clamped = ad.clamp_min(picked, LOG_FLOOR)
    return ad.sum_all(ad.mul_const(clamped.scale(-1.0), weights))


def learning_rate(cfg: TrainConfig, step_index: int) -> float:
    """0-indexed schedule: linear warmup (lr(0) = peak/warmup), then decay."""
    if cfg.warmup_steps > 0 and step_index < cfg.warmup_steps:
        return cfg.peak_lr * (step_index + 1) / cfg.warmup_steps
    if cfg.decay == "constant":
        return cfg.peak_lr
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = min(1.0, (step_index - cfg.warmup_steps) / span)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class OptimizerState:
    """Per-tensor first/second moment accumulators, zero-initialized."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def optimizer_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    step_index: int,
    cfg: TrainConfig,
) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay adaptive-moment update, in place."""
    from . import kernels

    lr = learning_rate(cfg, step_index)
    b1, b2 = cfg.betas
    k = step_index + 1
    bias1 = 1.0 - b1**k
    bias2 = 1.0 - b2**k
    for name, p in params.items():
        kernels.adamw_update(
            p, grads[name], state.m[name], state.v[name],
            lr, b1, b2, cfg.eps, cfg.weight_decay, bias1, bias2,
        )
    return params


@dataclass
class TrainState:
    """Everything train_step mutates: model, moments, optional untied corrector."""

    model: Denoiser
    opt: OptimizerState
    corrector: Denoiser | None = None
    corrector_opt: OptimizerState | None = None

    @classmethod
    def init(cls, model: Denoiser, cfg: TrainConfig, rng: Rng | None = None) -> "TrainState":
        corrector = None
        corrector_opt = None
        if not cfg.weight_tying:
            if rng is None:
                raise InvalidInputError("untied corrector needs an rng for initialization")
            corrector = Denoiser.init(model.cfg, rng)
            corrector_opt = OptimizerState(corrector.params)
        return cls(model=model, opt=OptimizerState(model.params), corrector=corrector,
                   corrector_opt=corrector_opt)


def train_step(
    state: TrainState,
    batch: list[np.ndarray],
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    rng: Rng,
    step_index: int,
) -> LossBreakdown:
    """One optimization step: corrupt, denoise, self-correct, update.

    Per element: draw t on [min_t, 1], corrupt, forward, accumulate the
    masked-denoising term; greedy-decode the output behind the stop-gradient
    barrier, forward again on that sequence, accumulate the correction term.
    Losses are averaged over the batch and applied in a single update.
    Raises NumericError (parameters untouched) on a non-finite loss.
    """
    if not batch:
        raise InvalidInputError("batch must be nonempty")
    model = state.model
    vocab = model.vocab
    lengths = {len(b) for b in batch}
    if len(lengths) != 1:
        raise InvalidInputError("batch sequences must share one (padded) length")

    xs = np.stack([np.asarray(b) for b in batch])
    bsz = xs.shape[0]
    ts = np.empty(bsz)
    z_rows = []
    for i in range(bsz):
        ts[i] = sample_time(rng, schedule)
        z_rows.append(corrupt(xs[i], ts[i], schedule, rng, vocab).tokens)
    z = np.stack(z_rows)

    nonpad = xs != vocab.pad_id
    masked = (z == vocab.mask_id) & nonpad
    w_sched = np.array([loss_weight(schedule, t) for t in ts])

    leaves = model.leaves()
    all_leaves = dict(leaves)
    out1 = model.forward_graph(leaves, z)
    mdm_node = _weighted_nll_graph(out1.graph, xs, masked * w_sched[:, None] / bsz)

    sc_value = 0.0
    total_node = mdm_node
    if cfg.corrector_loss_enabled:
        base = apply_copy_over(out1, z, vocab) if model.cfg.copy_over else out1
        y = build_corrector_input(base)
        if state.corrector is not None:
            corr_leaves = state.corrector.leaves()
            all_leaves.update({"corrector." + k: t for k, t in corr_leaves.items()})
            out2 = state.corrector.forward_graph(corr_leaves, y)
        else:
            out2 = model.forward_graph(leaves, y)
        w_sc = np.array([_sc_weight(cfg.lambda_mode, cfg.lambda_const, schedule, t) for t in ts])
        sc_node = _weighted_nll_graph(out2.graph, xs, nonpad * w_sc[:, None] / bsz)
        sc_value = float(sc_node.value)
        total_node = mdm_node + sc_node

    _, grads = compute_gradients(total_node, all_leaves)
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; parameters left unmodified")

    if cfg.grad_clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.grad_clip_norm:
            scale = cfg.grad_clip_norm / norm
            grads = {k: g * scale for k, g in grads.items()}

    optimizer_update(
        model.params, {k: grads[k] for k in model.params}, state.opt, step_index, cfg
    )
    if state.corrector is not None:
        optimizer_update(
            state.corrector.params,
            {k: grads["corrector." + k] for k in state.corrector.params},
            state.corrector_opt,
            step_index,
            cfg,
        )

    mdm_value = float(mdm_node.value)
    return LossBreakdown(
        mdm_loss=mdm_value,
        sc_loss=sc_value,
        total=mdm_value + sc_value,
        t_used=float(ts.mean()),
        masked_fraction=float(masked.sum() / max(1, nonpad.sum())),
    )
