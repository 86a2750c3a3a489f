"""Vocabulary, token sequences, noise schedules, and deterministic RNG.

Token sequences are plain ``numpy`` integer arrays of shape ``(L,)`` (or
``(B, L)`` where batching applies). The vocabulary reserves three ids after
the ordinary tokens: mask, EOS, pad, in that order, so model output vectors
of width ``alphabet_size`` can zero reserved entries by index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DomainError",
    "SingularityError",
    "InvalidInputError",
    "NumericError",
    "GuardError",
    "FormatError",
    "VersionError",
    "Vocabulary",
    "NoiseSchedule",
    "Rng",
    "alpha",
    "alpha_dot",
    "alpha_inverse",
    "loss_weight",
    "sample_time",
    "as_tokens",
]


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class SingularityError(ArithmeticError):
    """Evaluation at a point where the formula diverges (e.g. division by zero)."""


class InvalidInputError(ValueError):
    """Structurally invalid input (wrong ids, mismatched lengths, bad ordering)."""


class NumericError(ArithmeticError):
    """Non-finite value encountered during computation."""


class GuardError(RuntimeError):
    """Tractability guard tripped: the requested instance is too large to enumerate."""


class FormatError(ValueError):
    """Malformed serialized data. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """Serialized data carries an unsupported version marker."""


@dataclass(frozen=True)
class Vocabulary:
    """Finite token alphabet with reserved mask/EOS/pad ids appended after it.

    ``size`` counts ordinary tokens only; ids ``0..size-1`` are ordinary,
    ``mask_id = size``, ``eos_id = size + 1``, ``pad_id = size + 2``.
    ``glyphs``, when given, maps ordinary ids to characters for detokenization.
    """

    size: int
    glyphs: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 1:
            raise InvalidInputError(f"vocabulary needs at least one ordinary token, got {self.size}")
        if self.glyphs is not None and len(self.glyphs) != self.size:
            raise InvalidInputError("glyphs must cover exactly the ordinary tokens")

    @property
    def mask_id(self) -> int:
        return self.size

    @property
    def eos_id(self) -> int:
        return self.size + 1

    @property
    def pad_id(self) -> int:
        return self.size + 2

    @property
    def alphabet_size(self) -> int:
        return self.size + 3

    def is_reserved(self, token_id: int) -> bool:
        return token_id >= self.size

    def validate_tokens(self, tokens: np.ndarray, allow_mask: bool = True) -> None:
        tokens = np.asarray(tokens)
        if tokens.size == 0:
            raise InvalidInputError("token sequences must have length >= 1")
        if tokens.min() < 0 or tokens.max() >= self.alphabet_size:
            raise InvalidInputError(
                f"token id out of range for alphabet of size {self.alphabet_size}"
            )
        if not allow_mask and np.any(tokens == self.mask_id):
            raise InvalidInputError("sequence unexpectedly contains the mask token")

    def detokenize(self, tokens: np.ndarray) -> str:
        """Render a sequence as text. Reserved ids map to bracketed markers."""
        special = {self.mask_id: "[M]", self.eos_id: "[EOS]", self.pad_id: "[PAD]"}
        out = []
        for t in np.asarray(tokens).tolist():
            if t in special:
                out.append(special[t])
            elif self.glyphs is not None:
                out.append(self.glyphs[t])
            else:
                out.append(f"<{t}>")
        return "".join(out)


def as_tokens(values) -> np.ndarray:
    """Coerce a python list / array into the canonical int64 token array."""
    arr = np.ascontiguousarray(values, dtype=np.int64)
    if arr.ndim != 1:
        raise InvalidInputError(f"expected a 1-d token sequence, got shape {arr.shape}")
    return arr


_SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Masking schedule: keep-probability alpha(t) decreasing from 1 to 0.

    ``min_t`` biases training-time draws toward heavier masking; it never
    affects the schedule itself.
    """

    kind: str = "linear"
    min_t: float = 0.1

    def __post_init__(self):
        if self.kind not in _SCHEDULE_KINDS:
            raise InvalidInputError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.min_t < 1.0:
            raise InvalidInputError(f"min_t must lie in [0, 1), got {self.min_t}")


def _check_unit_interval(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"time must lie in [0, 1], got {t}")
    return t


def alpha(schedule: NoiseSchedule, t: float) -> float:
    """Keep-probability at time t. Linear kind: 1 - t."""
    t = _check_unit_interval(t)
    return 1.0 - t


def alpha_dot(schedule: NoiseSchedule, t: float) -> float:
    """Time derivative of alpha. Linear kind: -1 everywhere."""
    _check_unit_interval(t)
    return -1.0


def alpha_inverse(schedule: NoiseSchedule, a: float) -> float:
    """Time at which alpha equals ``a``. Linear kind: 1 - a."""
    a = float(a)
    if not 0.0 <= a <= 1.0:
        raise DomainError(f"alpha value must lie in [0, 1], got {a}")
    return 1.0 - a


def loss_weight(schedule: NoiseSchedule, t: float) -> float:
    """Positive per-step loss weight -alpha_dot(t) / (1 - alpha(t)).

    For the linear schedule this is 1/t. Written with the sign flipped
    relative to the raw bound so callers minimize a positive quantity.
    """
    t = _check_unit_interval(t)
    denom = 1.0 - alpha(schedule, t)
    if denom == 0.0:
        raise SingularityError(f"loss weight diverges at t={t} (alpha=1)")
    return -alpha_dot(schedule, t) / denom


class Rng:
    """Counter-based deterministic random stream (Philox).

    Streams are identified by ``(seed, path)``; ``derive(i)`` appends ``i``
    to the path, so parallel workers get independent reproducible streams
    without shared state. A single Rng instance is single-owner: never share
    one across threads.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def derive(self, index: int) -> "Rng":
        """Independent stream for sub-task ``index`` (run, cell, sample...)."""
        return Rng(self.seed, self.path + (int(index),))

    def uniform(self) -> float:
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(int(n))

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def normal(self, scale: float, size) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def dirichlet(self, concentration: np.ndarray) -> np.ndarray:
        return self._gen.dirichlet(concentration)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def sample_time(rng: Rng, schedule: NoiseSchedule) -> float:
    """Draw a training time uniformly on [min_t, 1]."""
    u = rng.uniform()
    return schedule.min_t + (1.0 - schedule.min_t) * u
