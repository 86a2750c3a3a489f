"""Unmasking samplers with interleaved self-correction loops.

Flat sampling walks the time grid t(i) = i/T from i = T down to 1, running a
corrector loop every ``omega`` unmasking steps; block-autoregressive sampling
applies the same inner loop per fixed-size block, left to right, while the
corrector may still rewrite any previously decoded block. Every forward pass
is counted in the run trace.

Model protocol: ``model.forward(tokens, condition) -> DenoiserOutput``,
``model.vocab``, and ``model.cfg.copy_over``. Anything satisfying it (e.g. a
test stub) can be sampled from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, InvalidInputError, NoiseSchedule, Rng, Vocabulary, alpha
from .denoiser import DenoiserOutput, apply_copy_over, argmax_decode
from .diffusion import NoisyLatent

__all__ = [
    "SamplerConfig",
    "RunTrace",
    "sample_posterior_ancestral",
    "sample_posterior_confidence",
    "corrector_loop",
    "guided_logits",
    "proseco_sample",
    "proseco_sample_block_ar",
    "mdm_sample",
    "mdm_sample_block_ar",
    "count_nfe",
]


@dataclass(frozen=True)
class SamplerConfig:
    length: int
    steps: int  # unmasking steps per (block) pass
    omega: int = 1  # run a corrector loop every omega unmasking steps
    corrector_steps: int = 0  # max corrector iterations per loop
    block_size: int = 0  # 0 = flat sampling; else must divide length
    posterior: str = "ancestral"  # or "confidence"
    corrector_sample: str = "greedy"
    gamma: float = 1.0
    eos_early_stop: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.steps <= self.length:
            raise InvalidInputError(f"need 1 <= steps <= length, got steps={self.steps}, length={self.length}")
        if self.block_size != 0 and self.length % self.block_size != 0:
            raise InvalidInputError(f"block_size {self.block_size} does not divide length {self.length}")
        if self.omega < 1:
            raise InvalidInputError("omega must be >= 1")
        if self.corrector_steps < 0:
            raise InvalidInputError("corrector budget must be >= 0")
        if self.posterior not in ("ancestral", "confidence"):
            raise InvalidInputError(f"unknown posterior kind {self.posterior!r}")
        if self.corrector_sample != "greedy":
            raise InvalidInputError("only greedy corrector sampling is supported")


@dataclass
class RunTrace:
    """Ordered event log of one generation run plus the exact forward count."""

    events: list[dict] = field(default_factory=list)
    forward_pass_count: int = 0
    final_tokens: np.ndarray | None = None

    def add_forward(self, n: int = 1) -> None:
        self.forward_pass_count += n

    def record_unmask(self, step: int, positions: np.ndarray, block: int | None = None) -> None:
        ev = {"type": "unmask", "step": int(step), "positions": [int(p) for p in positions]}
        if block is not None:
            ev["block"] = int(block)
        self.events.append(ev)

    def record_corrector(self, iterations: int, changed: np.ndarray, block: int | None = None) -> None:
        ev = {
            "type": "corrector",
            "iterations": int(iterations),
            "changed": [int(p) for p in changed],
        }
        if block is not None:
            ev["block"] = int(block)
        self.events.append(ev)

    def record_eos_stop(self, block: int) -> None:
        self.events.append({"type": "eos_stop", "block": int(block)})

    def to_json(self, vocab: Vocabulary | None = None) -> dict:
        out = {
            "events": self.events,
            "nfe": self.forward_pass_count,
            "tokens": [int(t) for t in self.final_tokens] if self.final_tokens is not None else None,
        }
        if vocab is not None and vocab.glyphs is not None and self.final_tokens is not None:
            out["text"] = vocab.detokenize(self.final_tokens)
        return out


def count_nfe(trace: RunTrace) -> int:
    """Forward passes consumed by the run (guided steps count both passes)."""
    return trace.forward_pass_count


def sample_posterior_ancestral(
    output: DenoiserOutput,
    z_t: NoisyLatent,
    alpha_s: float,
    alpha_t: float,
    rng: Rng,
    vocab: Vocabulary,
    active: np.ndarray | None = None,
) -> NoisyLatent:
    """Reveal each masked position with the posterior probability, drawing
    its token from the model row; unmasked positions are copied unchanged.

    ``active`` optionally restricts which masked positions may reveal (block
    decoding). Two uniforms are consumed per candidate position regardless of
    the outcome, so stream consumption is data-independent.
    """
    if alpha_s <= alpha_t:
        raise DomainError(f"need alpha_s > alpha_t, got {alpha_s} <= {alpha_t}")
    tokens = np.asarray(z_t.tokens).copy()
    candidates = tokens == vocab.mask_id
    if active is not None:
        candidates &= active
    idx = np.nonzero(candidates)[0]
    if idx.size == 0:
        return NoisyLatent(tokens=tokens, t=z_t.t)

    p_reveal = (alpha_s - alpha_t) / (1.0 - alpha_t)
    u_reveal = rng.uniforms(idx.size)
    u_token = rng.uniforms(idx.size)
    reveal = u_reveal < p_reveal
    if np.any(reveal):
        rows = output.probs[idx[reveal]]
        cdf = np.cumsum(rows, axis=1)
        cdf /= cdf[:, -1:]
        drawn = (cdf <= u_token[reveal, None]).sum(axis=1)
        tokens[idx[reveal]] = drawn
    return NoisyLatent(tokens=tokens, t=z_t.t)


def sample_posterior_confidence(
    output: DenoiserOutput,
    z_t: NoisyLatent,
    k: int,
    rng: Rng,
    vocab: Vocabulary,
    active: np.ndarray | None = None,
) -> NoisyLatent:
    """Commit the k highest-confidence greedy proposals among masked positions.

    Ties break toward the lowest position index. ``rng`` is unused (the rule
    is deterministic) but kept for interface parity with the ancestral kind.
    """
    tokens = np.asarray(z_t.tokens).copy()
    candidates = tokens == vocab.mask_id
    if active is not None:
        candidates &= active
    idx = np.nonzero(candidates)[0]
    k = min(int(k), idx.size)
    if k <= 0:
        return NoisyLatent(tokens=tokens, t=z_t.t)

    rows = output.probs[idx]
    proposals = np.argmax(rows, axis=1)
    conf = rows[np.arange(idx.size), proposals]
    order = np.argsort(-conf, kind="stable")[:k]
    tokens[idx[order]] = proposals[order]
    return NoisyLatent(tokens=tokens, t=z_t.t)


def guided_logits(
    cond: DenoiserOutput, uncond: DenoiserOutput, gamma: float, vocab: Vocabulary
) -> DenoiserOutput:
    """Log-linear guidance mix: uncond + gamma * (cond - uncond), renormalized.

    gamma = 1 returns the conditional output exactly and gamma = 0 the
    unconditional one, so the endpoints cannot drift from the single-model
    paths.
    """
    from . import kernels

    if cond.scores.shape != uncond.scores.shape:
        raise InvalidInputError("guided mixing needs equal-shape outputs")
    if gamma == 1.0:
        scores = cond.scores.copy()
    elif gamma == 0.0:
        scores = uncond.scores.copy()
    else:
        with np.errstate(invalid="ignore"):
            scores = uncond.scores + gamma * (cond.scores - uncond.scores)
        scores[..., vocab.mask_id] = -np.inf
        scores[..., vocab.pad_id] = -np.inf
    logp = kernels.log_softmax_fwd(scores)
    return DenoiserOutput(probs=np.exp(logp), scores=scores)


def corrector_loop(
    model,
    corrector_steps: int,
    z_t: NoisyLatent,
    logits: DenoiserOutput,
    condition: int | None = None,
    trace: RunTrace | None = None,
    corrector_model=None,
) -> tuple[NoisyLatent, DenoiserOutput]:
    """Iteratively re-predict a fully token-valued proposal and overwrite the
    unmasked positions of the latent with it.

    The proposal starts as the greedy decode of ``logits``; each iteration
    runs one forward pass on it and greedily re-decodes, breaking early when
    the proposal stops changing. Masked positions of the latent are never
    touched. Returns the updated latent and the last corrector output (which
    callers feed to the posterior sampler in place of ``logits``).
    """
    cmodel = corrector_model if corrector_model is not None else model
    vocab = model.vocab
    tokens = np.asarray(z_t.tokens)
    if corrector_steps <= 0:
        return z_t, logits

    y = argmax_decode(logits)
    last = logits
    iterations = 0
    for _ in range(corrector_steps):
        last = cmodel.forward(y, condition)
        if trace is not None:
            trace.add_forward(1)
        iterations += 1
        y_next = argmax_decode(last)
        if np.array_equal(y_next, y):
            break
        y = y_next

    unmasked = tokens != vocab.mask_id
    new_tokens = np.where(unmasked, y, tokens)
    if trace is not None:
        changed = np.nonzero(new_tokens != tokens)[0]
        trace.record_corrector(iterations, changed)
    return NoisyLatent(tokens=new_tokens, t=z_t.t), last


def _model_logits(model, tokens, condition, gamma, trace: RunTrace) -> DenoiserOutput:
    """Forward pass, mixing conditional/unconditional passes when guided."""
    if condition is not None and gamma != 1.0:
        cond_out = model.forward(tokens, condition)
        uncond_out = model.forward(tokens, None)
        trace.add_forward(2)
        return guided_logits(cond_out, uncond_out, gamma, model.vocab)
    out = model.forward(tokens, condition)
    trace.add_forward(1)
    return out


def _greedy_fill(model, cfg, condition, z, fill_mask, trace, block=None) -> np.ndarray:
    """Resolve residual masked positions with one greedy forward pass."""
    out = _model_logits(model, z, condition, cfg.gamma, trace)
    proposals = argmax_decode(out)
    z = z.copy()
    z[fill_mask] = proposals[fill_mask]
    trace.record_unmask(0, np.nonzero(fill_mask)[0], block)
    return z


def _unmask_pass(
    model,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    condition,
    rng: Rng,
    z: np.ndarray,
    trace: RunTrace,
    active: np.ndarray | None,
    block: int | None,
    with_corrector: bool,
    corrector_model=None,
) -> np.ndarray:
    vocab = model.vocab
    steps = cfg.steps
    for i in range(steps, 0, -1):
        out = _model_logits(model, z, condition, cfg.gamma, trace)
        if model.cfg.copy_over:
            out = apply_copy_over(out, z, vocab)
        latent = NoisyLatent(tokens=z, t=i / steps)
        if with_corrector and cfg.corrector_steps > 0 and (steps - i + 1) % cfg.omega == 0:
            latent, out = corrector_loop(
                model, cfg.corrector_steps, latent, out,
                condition=condition, trace=trace, corrector_model=corrector_model,
            )
        a_t = alpha(schedule, i / steps)
        a_s = alpha(schedule, (i - 1) / steps)
        before_masked = latent.tokens == vocab.mask_id
        if cfg.posterior == "ancestral":
            latent = sample_posterior_ancestral(out, latent, a_s, a_t, rng, vocab, active)
        else:
            remaining = before_masked if active is None else before_masked & active
            k = math.ceil(int(remaining.sum()) / i)
            latent = sample_posterior_confidence(out, latent, k, rng, vocab, active)
        z = latent.tokens
        decoded = np.nonzero(before_masked & (z != vocab.mask_id))[0]
        trace.record_unmask(i, decoded, block)
    return z


def proseco_sample(
    model,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    condition: int | None = None,
    rng: Rng | None = None,
    corrector_model=None,
) -> tuple[np.ndarray, RunTrace]:
    """Flat sampling with interleaved self-correction (block_size must be 0)."""
    if cfg.block_size != 0:
        raise InvalidInputError("flat sampler requires block_size == 0; use the block-AR sampler")
    rng = rng if rng is not None else Rng(cfg.seed)
    vocab = model.vocab
    trace = RunTrace()
    z = np.full(cfg.length, vocab.mask_id, dtype=np.int64)
    z = _unmask_pass(
        model, cfg, schedule, condition, rng, z, trace,
        active=None, block=None, with_corrector=True, corrector_model=corrector_model,
    )
    residual = z == vocab.mask_id
    if np.any(residual):
        z = _greedy_fill(model, cfg, condition, z, residual, trace)
    trace.final_tokens = z
    return z, trace


def mdm_sample(
    model,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    condition: int | None = None,
    rng: Rng | None = None,
) -> tuple[np.ndarray, RunTrace]:
    """Baseline unmasking sampler: the same walk with no corrector machinery."""
    if cfg.block_size != 0:
        raise InvalidInputError("flat sampler requires block_size == 0; use the block-AR sampler")
    rng = rng if rng is not None else Rng(cfg.seed)
    vocab = model.vocab
    trace = RunTrace()
    z = np.full(cfg.length, vocab.mask_id, dtype=np.int64)
    z = _unmask_pass(
        model, cfg, schedule, condition, rng, z, trace,
        active=None, block=None, with_corrector=False,
    )
    residual = z == vocab.mask_id
    if np.any(residual):
        z = _greedy_fill(model, cfg, condition, z, residual, trace)
    trace.final_tokens = z
    return z, trace


def _block_ar(
    model,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    condition,
    rng: Rng,
    with_corrector: bool,
    corrector_model=None,
) -> tuple[np.ndarray, RunTrace]:
    if cfg.block_size == 0:
        raise InvalidInputError("block-AR sampler requires a nonzero block_size")
    vocab = model.vocab
    B = cfg.block_size
    n_blocks = cfg.length // B
    trace = RunTrace()
    z = np.full(cfg.length, vocab.mask_id, dtype=np.int64)
    for b in range(n_blocks):
        active = np.zeros(cfg.length, dtype=bool)
        active[b * B : (b + 1) * B] = True
        z = _unmask_pass(
            model, cfg, schedule, condition, rng, z, trace,
            active=active, block=b, with_corrector=with_corrector,
            corrector_model=corrector_model,
        )
        block_residual = (z == vocab.mask_id) & active
        if np.any(block_residual):
            z = _greedy_fill(model, cfg, condition, z, block_residual, trace, block=b)
        if cfg.eos_early_stop and np.any(z[: (b + 1) * B] == vocab.eos_id):
            z[(b + 1) * B :] = vocab.pad_id
            trace.record_eos_stop(b)
            break
    trace.final_tokens = z
    return z, trace


def proseco_sample_block_ar(
    model,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    condition: int | None = None,
    rng: Rng | None = None,
    corrector_model=None,
) -> tuple[np.ndarray, RunTrace]:
    """Block-autoregressive sampling: unmask one block at a time, left to
    right, while corrector loops may rewrite any previously decoded token."""
    rng = rng if rng is not None else Rng(cfg.seed)
    return _block_ar(model, cfg, schedule, condition, rng, True, corrector_model)


def mdm_sample_block_ar(
    model,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    condition: int | None = None,
    rng: Rng | None = None,
) -> tuple[np.ndarray, RunTrace]:
    """Baseline block-autoregressive sampler without correction."""
    rng = rng if rng is not None else Rng(cfg.seed)
    return _block_ar(model, cfg, schedule, condition, rng, False)
