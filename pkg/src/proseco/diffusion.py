"""Forward absorbing corruption process and its closed-form reverse posterior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DomainError,
    InvalidInputError,
    NoiseSchedule,
    Rng,
    SingularityError,
    Vocabulary,
    alpha,
    alpha_inverse,
)

__all__ = ["NoisyLatent", "corrupt", "true_posterior", "forward_trajectory"]


@dataclass(frozen=True)
class NoisyLatent:
    """Partially masked sequence together with the time it was drawn at."""

    tokens: np.ndarray
    t: float


def corrupt(x: np.ndarray, t: float, schedule: NoiseSchedule, rng: Rng, vocab: Vocabulary) -> NoisyLatent:
    """Mask each position independently with probability 1 - alpha(t)."""
    x = np.asarray(x)
    if np.any(x == vocab.mask_id):
        raise InvalidInputError("clean input already contains the mask token")
    keep = alpha(schedule, t)
    u = rng.uniforms(x.shape[-1]) if x.ndim == 1 else rng.uniforms(x.size).reshape(x.shape)
    tokens = np.where(u < 1.0 - keep, vocab.mask_id, x)
    return NoisyLatent(tokens=tokens, t=float(t))


def true_posterior(
    x_prob: np.ndarray,
    z_t: NoisyLatent,
    s: float,
    t: float,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
) -> np.ndarray:
    """Per-position posterior over the latent at an earlier time s < t.

    ``x_prob`` is an ``(L, alphabet)`` simplex per position: either a one-hot
    encoding of clean data or a denoiser output. Unmasked positions yield a
    point mass on their current token; masked positions mix ``x_prob`` with
    the mask according to the schedule. Any mass ``x_prob`` puts on the mask
    id is dropped and the row renormalized before mixing.
    """
    if not s < t:
        raise DomainError(f"posterior needs s < t, got s={s}, t={t}")
    a_s = alpha(schedule, s)
    a_t = alpha(schedule, t)
    if a_t == 1.0:
        raise SingularityError("posterior undefined at alpha_t = 1 (no position can be masked)")

    x_prob = np.asarray(x_prob, dtype=np.float64)
    tokens = np.asarray(z_t.tokens)
    L = tokens.shape[0]
    A = vocab.alphabet_size
    if x_prob.shape != (L, A):
        raise InvalidInputError(f"x_prob shape {x_prob.shape} does not match ({L}, {A})")

    stay_masked = (1.0 - a_s) / (1.0 - a_t)
    reveal = (a_s - a_t) / (1.0 - a_t)

    out = np.zeros((L, A))
    masked = tokens == vocab.mask_id
    if np.any(masked):
        rows = x_prob[masked].copy()
        rows[:, vocab.mask_id] = 0.0
        totals = rows.sum(axis=1, keepdims=True)
        if np.any(totals <= 0.0):
            raise InvalidInputError("x_prob row has no mass outside the mask token")
        rows /= totals
        out[masked] = reveal * rows
        out[masked, vocab.mask_id] = stay_masked
    unmasked_idx = np.nonzero(~masked)[0]
    out[unmasked_idx, tokens[unmasked_idx]] = 1.0
    return out


def forward_trajectory(
    x: np.ndarray,
    times: list[float],
    schedule: NoiseSchedule,
    rng: Rng,
    vocab: Vocabulary,
) -> list[NoisyLatent]:
    """Jointly consistent absorbing trajectory across ascending times.

    Each position draws a single masking time with survival function
    alpha(t); the latent at time t masks exactly the positions whose masking
    time has passed. Masked sets are therefore non-decreasing along the list
    and every marginal matches ``corrupt`` at that time.
    """
    x = np.asarray(x)
    if np.any(x == vocab.mask_id):
        raise InvalidInputError("clean input already contains the mask token")
    times = [float(v) for v in times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise InvalidInputError(f"times must be strictly ascending, got {times}")
    for v in times:
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"times must lie in [0, 1], got {v}")

    # P(mask time <= t) = 1 - alpha(t), so mask_time = alpha_inverse(u) with
    # u uniform on [0, 1); u -> 1 - u lands in (0, 1] for the linear kind.
    u = rng.uniforms(x.shape[0])
    mask_time = np.array([alpha_inverse(schedule, ui) for ui in u])

    out = []
    for v in times:
        tokens = np.where(mask_time <= v, vocab.mask_id, x)
        out.append(NoisyLatent(tokens=tokens, t=v))
    return out
