"""Brute-force oracles and evaluation metrics.

The oracles deliberately re-derive results the fast paths compute in closed
form (Bayes enumeration for the reverse posterior, branch expansion for the
sampler law) so tests can compare two independent routes. Tractability
guards are hard errors.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .core import (
    GuardError,
    InvalidInputError,
    NoiseSchedule,
    Vocabulary,
    alpha,
)
from .denoiser import apply_copy_over, argmax_decode
from .diffusion import NoisyLatent
from .samplers import SamplerConfig, sample_posterior_confidence

__all__ = [
    "ExactDistribution",
    "GroundTruthModel",
    "posterior_bayes_oracle",
    "enumerate_sampler_distribution",
    "tv_distance",
    "sequence_entropy",
    "oracle_nll",
    "expected_nll_per_token",
    "gt_unigram",
    "gt_bigram",
    "empirical_unigram",
    "empirical_bigram",
    "validity_rate",
    "is_balanced_parens",
]

ExactDistribution = dict[tuple[int, ...], float]

_ORACLE_MAX_V = 4
_ORACLE_MAX_L = 3
_ENUM_SUPPORT_LIMIT = 10_000
_ENUM_LEAF_LIMIT = 1_000_000
_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GroundTruthModel:
    """First-order Markov chain over the ordinary tokens."""

    init_dist: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        init = np.asarray(self.init_dist, dtype=np.float64)
        trans = np.asarray(self.transition, dtype=np.float64)
        object.__setattr__(self, "init_dist", init)
        object.__setattr__(self, "transition", trans)
        if trans.ndim != 2 or trans.shape[0] != trans.shape[1] or init.shape != (trans.shape[0],):
            raise InvalidInputError("transition must be VxV and init_dist length V")
        if abs(init.sum() - 1.0) > 1e-12 or np.any(np.abs(trans.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidInputError("distributions must be stochastic to 1e-12")

    @property
    def n_tokens(self) -> int:
        return self.init_dist.shape[0]


def posterior_bayes_oracle(
    x: np.ndarray,
    z_t: NoisyLatent,
    s: float,
    t: float,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
) -> np.ndarray:
    """Reverse posterior by brute force: enumerate every earlier latent,
    weight it by forward-marginal times absorbing transition, normalize.

    Restricted to V <= 4, L <= 3. The latent must be reachable from ``x``
    (conditioning on a zero-probability latent is undefined).
    """
    x = np.asarray(x)
    L = x.shape[0]
    if vocab.size > _ORACLE_MAX_V or L > _ORACLE_MAX_L:
        raise GuardError(f"bayes oracle limited to V<={_ORACLE_MAX_V}, L<={_ORACLE_MAX_L}")
    if not s < t:
        raise InvalidInputError(f"need s < t, got {s}, {t}")
    zt = np.asarray(z_t.tokens)
    a_s = alpha(schedule, s)
    a_t = alpha(schedule, t)
    A = vocab.alphabet_size
    m = vocab.mask_id

    def q_zs_given_x(zs_tok: int, x_tok: int) -> float:
        if zs_tok == x_tok:
            return a_s
        if zs_tok == m:
            return 1.0 - a_s
        return 0.0

    def q_zt_given_zs(zt_tok: int, zs_tok: int) -> float:
        if zs_tok == m:
            return 1.0 if zt_tok == m else 0.0
        if zt_tok == zs_tok:
            return a_t / a_s
        if zt_tok == m:
            return 1.0 - a_t / a_s
        return 0.0

    marginals = np.zeros((L, A))
    total = 0.0
    for zs in itertools.product(range(A), repeat=L):
        w = 1.0
        for pos in range(L):
            w *= q_zs_given_x(zs[pos], int(x[pos])) * q_zt_given_zs(int(zt[pos]), zs[pos])
            if w == 0.0:
                break
        if w == 0.0:
            continue
        total += w
        for pos in range(L):
            marginals[pos, zs[pos]] += w
    if total == 0.0:
        raise InvalidInputError("latent is unreachable from the given clean sequence")
    return marginals / total


def enumerate_sampler_distribution(
    model,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    condition: int | None = None,
) -> ExactDistribution:
    """Exact output law of flat sampling by expanding every stochastic branch.

    Deterministic parts (forward passes, corrector loops, confidence
    commits, greedy fill) follow single branches; ancestral reveals fan out
    per masked position. States reached along different paths are merged, so
    the expansion count stays well under the leaf guard for micro instances.
    """
    vocab = model.vocab
    if (vocab.size + 1) ** cfg.length > _ENUM_SUPPORT_LIMIT:
        raise GuardError("instance too large: support exceeds the enumeration guard")
    if cfg.block_size != 0:
        raise GuardError("enumeration covers flat sampling only")
    if cfg.gamma != 1.0:
        raise GuardError("enumeration covers unguided sampling only")

    cache: dict[bytes, object] = {}

    def fwd(z: np.ndarray):
        key = z.tobytes()
        if key not in cache:
            cache[key] = model.forward(z, condition)
        return cache[key]

    def run_corrector(z: np.ndarray, out):
        y = argmax_decode(out)
        last = out
        for _ in range(cfg.corrector_steps):
            last = fwd(y)
            y_next = argmax_decode(last)
            if np.array_equal(y_next, y):
                break
            y = y_next
        return np.where(z != vocab.mask_id, y, z), last

    steps = cfg.steps
    expansions = 0
    states: dict[tuple[int, ...], float] = {
        tuple([vocab.mask_id] * cfg.length): 1.0
    }
    for i in range(steps, 0, -1):
        a_t = alpha(schedule, i / steps)
        a_s = alpha(schedule, (i - 1) / steps)
        reveal_p = (a_s - a_t) / (1.0 - a_t)
        new_states: dict[tuple[int, ...], float] = defaultdict(float)
        for state, p_state in states.items():
            z = np.array(state, dtype=np.int64)
            out = fwd(z)
            if model.cfg.copy_over:
                out = apply_copy_over(out, z, vocab)
            if cfg.corrector_steps > 0 and (steps - i + 1) % cfg.omega == 0:
                z, out = run_corrector(z, out)
            masked_idx = np.nonzero(z == vocab.mask_id)[0]
            if cfg.posterior == "confidence":
                k = math.ceil(masked_idx.size / i)
                latent = sample_posterior_confidence(
                    out, NoisyLatent(tokens=z, t=i / steps), k, None, vocab
                )
                new_states[tuple(latent.tokens)] += p_state
                expansions += 1
            else:
                options = []
                for pos in masked_idx:
                    row = out.probs[pos] / out.probs[pos].sum()
                    opts = [(vocab.mask_id, 1.0 - reveal_p)]
                    opts += [
                        (tok, reveal_p * row[tok])
                        for tok in range(vocab.alphabet_size)
                        if row[tok] > 0.0
                    ]
                    options.append(opts)
                for combo in itertools.product(*options):
                    z_next = z.copy()
                    p_branch = p_state
                    for pos, (tok, p_opt) in zip(masked_idx, combo):
                        z_next[pos] = tok
                        p_branch *= p_opt
                    if p_branch == 0.0:
                        continue
                    new_states[tuple(z_next)] += p_branch
                    expansions += 1
                    if expansions > _ENUM_LEAF_LIMIT:
                        raise GuardError("enumeration branch tree exceeds the leaf guard")
        states = dict(new_states)

    result: dict[tuple[int, ...], float] = defaultdict(float)
    for state, p_state in states.items():
        z = np.array(state, dtype=np.int64)
        residual = z == vocab.mask_id
        if np.any(residual):
            proposals = argmax_decode(fwd(z))
            z = np.where(residual, proposals, z)
        result[tuple(int(v) for v in z)] += p_state
    return dict(result)


def tv_distance(p, q) -> float:
    """Total variation distance over a shared support universe."""
    if isinstance(p, dict) and isinstance(q, dict):
        keys = p.keys() | q.keys()
        return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError("tv_distance needs matching supports")
    return 0.5 * float(np.abs(p - q).sum())


def sequence_entropy(samples: list[np.ndarray], vocab: Vocabulary) -> float:
    """Mean per-sequence empirical token entropy in nats, pads excluded."""
    if len(samples) == 0:
        raise InvalidInputError("sequence_entropy needs at least one sample")
    total = 0.0
    for seq in samples:
        seq = np.asarray(seq)
        toks = seq[seq != vocab.pad_id]
        if toks.size == 0:
            continue
        _, counts = np.unique(toks, return_counts=True)
        freq = counts / toks.size
        total += float(-(freq * np.log(freq)).sum())
    return total / len(samples)


def oracle_nll(samples: list[np.ndarray], gt: GroundTruthModel) -> float:
    """Mean negative log-likelihood per token under the ground-truth chain."""
    if len(samples) == 0:
        raise InvalidInputError("oracle_nll needs at least one sample")
    V = gt.n_tokens
    log_init = np.log(np.maximum(gt.init_dist, _PROB_FLOOR))
    log_trans = np.log(np.maximum(gt.transition, _PROB_FLOOR))
    total = 0.0
    count = 0
    for seq in samples:
        seq = np.asarray(seq)
        if seq.min() < 0 or seq.max() >= V:
            raise InvalidInputError("sample contains token ids outside the ground-truth vocabulary")
        total -= log_init[seq[0]]
        total -= log_trans[seq[:-1], seq[1:]].sum()
        count += seq.size
    return total / count


def expected_nll_per_token(gt: GroundTruthModel, length: int) -> float:
    """Exact expected per-token NLL of length-``length`` draws from the chain."""
    init = gt.init_dist
    trans = gt.transition
    with np.errstate(divide="ignore", invalid="ignore"):
        h_init = float(-np.sum(np.where(init > 0, init * np.log(init), 0.0)))
        row_ent = -np.sum(np.where(trans > 0, trans * np.log(trans), 0.0), axis=1)
    total = h_init
    marginal = init.copy()
    for _ in range(length - 1):
        total += float(marginal @ row_ent)
        marginal = marginal @ trans
    return total / length


def gt_unigram(gt: GroundTruthModel, length: int) -> np.ndarray:
    """Position-averaged marginal over tokens, padded with an out-of-vocab cell."""
    V = gt.n_tokens
    acc = np.zeros(V)
    marginal = gt.init_dist.copy()
    for _ in range(length):
        acc += marginal
        marginal = marginal @ gt.transition
    out = np.zeros(V + 1)
    out[:V] = acc / length
    return out


def gt_bigram(gt: GroundTruthModel, length: int) -> np.ndarray:
    """Law of a uniformly random adjacent pair, with out-of-vocab cells at 0."""
    if length < 2:
        raise InvalidInputError("bigram law needs length >= 2")
    V = gt.n_tokens
    acc = np.zeros((V, V))
    marginal = gt.init_dist.copy()
    for _ in range(length - 1):
        acc += marginal[:, None] * gt.transition
        marginal = marginal @ gt.transition
    out = np.zeros((V + 1, V + 1))
    out[:V, :V] = acc / (length - 1)
    return out


def _fold_oov(seq: np.ndarray, V: int) -> np.ndarray:
    return np.where((seq >= 0) & (seq < V), seq, V)


def empirical_unigram(samples: list[np.ndarray], V: int) -> np.ndarray:
    """Token frequencies with everything non-ordinary folded into cell V."""
    counts = np.zeros(V + 1)
    for seq in samples:
        folded = _fold_oov(np.asarray(seq), V)
        counts += np.bincount(folded, minlength=V + 1)
    total = counts.sum()
    if total == 0:
        raise InvalidInputError("no tokens to count")
    return counts / total


def empirical_bigram(samples: list[np.ndarray], V: int) -> np.ndarray:
    """Adjacent-pair frequencies with non-ordinary ids folded into cell V."""
    counts = np.zeros((V + 1, V + 1))
    for seq in samples:
        folded = _fold_oov(np.asarray(seq), V)
        np.add.at(counts, (folded[:-1], folded[1:]), 1.0)
    total = counts.sum()
    if total == 0:
        raise InvalidInputError("no adjacent pairs to count")
    return counts / total


def is_balanced_parens(seq: np.ndarray, vocab: Vocabulary) -> bool:
    """Token 0 opens, token 1 closes; trailing pads are ignored."""
    seq = np.asarray(seq)
    end = seq.size
    while end > 0 and seq[end - 1] == vocab.pad_id:
        end -= 1
    if end == 0:
        return False
    depth = 0
    for tok in seq[:end]:
        if tok == 0:
            depth += 1
        elif tok == 1:
            depth -= 1
            if depth < 0:
                return False
        else:
            return False
    return depth == 0


def validity_rate(
    samples: list[np.ndarray],
    vocab: Vocabulary,
    grammar: str = "balanced_parens",
    reference: set[tuple[int, ...]] | None = None,
) -> tuple[float, float, float]:
    """(valid, unique, novel) fractions under a checkable toy grammar.

    valid: parseable share of all samples. unique: distinct share of the
    valid ones. novel: share of the distinct valid sequences absent from the
    reference set.
    """
    if grammar != "balanced_parens":
        raise InvalidInputError(f"unknown grammar {grammar!r}")
    if len(samples) == 0:
        return (0.0, 0.0, 0.0)
    reference = reference or set()
    valid = [tuple(int(t) for t in np.asarray(s)) for s in samples if is_balanced_parens(s, vocab)]
    if not valid:
        return (0.0, 0.0, 0.0)
    distinct = set(valid)
    novel = distinct - reference
    return (
        len(valid) / len(samples),
        len(distinct) / len(valid),
        len(novel) / len(distinct),
    )
