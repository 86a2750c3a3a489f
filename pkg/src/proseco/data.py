"""Synthetic corpora with exactly known statistics, plus file round-tripping.

Corpus file layout: one JSON header line (format name, version, spec, count,
and the ground-truth chain when the corpus is Markov), then one
space-separated integer line per sequence. Greppable and diffable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .core import FormatError, InvalidInputError, Rng, VersionError
from .oracles import GroundTruthModel

__all__ = [
    "CorpusSpec",
    "gen_markov_corpus",
    "sample_from_chain",
    "gen_paren_corpus",
    "save_corpus",
    "load_corpus",
]

_FORMAT = "proseco-corpus"
_VERSION = 1


@dataclass(frozen=True)
class CorpusSpec:
    kind: str  # "markov" or "balanced_parens"
    vocab_size: int
    length: int
    count: int
    seed: int = 0
    concentration: float = 0.3  # Dirichlet parameter for random chains

    def __post_init__(self):
        if self.kind not in ("markov", "balanced_parens"):
            raise InvalidInputError(f"unknown corpus kind {self.kind!r}")
        if self.count < 1:
            raise InvalidInputError("count must be >= 1")
        if self.vocab_size < 2:
            raise InvalidInputError("corpus vocabulary needs at least two tokens")


def sample_from_chain(gt: GroundTruthModel, count: int, length: int, rng: Rng) -> list[np.ndarray]:
    """Draw sequences from a Markov chain by vectorized inverse-CDF steps."""
    V = gt.n_tokens
    init_cdf = np.cumsum(gt.init_dist)
    init_cdf /= init_cdf[-1]
    trans_cdf = np.cumsum(gt.transition, axis=1)
    trans_cdf /= trans_cdf[:, -1:]
    out = np.empty((count, length), dtype=np.int64)
    u = rng.uniforms(count)
    out[:, 0] = np.minimum((init_cdf[None, :] <= u[:, None]).sum(axis=1), V - 1)
    for pos in range(1, length):
        u = rng.uniforms(count)
        cdf_rows = trans_cdf[out[:, pos - 1]]
        out[:, pos] = np.minimum((cdf_rows <= u[:, None]).sum(axis=1), V - 1)
    return [out[i] for i in range(count)]


def gen_markov_corpus(spec: CorpusSpec, rng: Rng) -> tuple[list[np.ndarray], GroundTruthModel]:
    """Draw a random chain from the spec, then draw the corpus from the chain."""
    if spec.kind != "markov":
        raise InvalidInputError("spec kind must be markov")
    V = spec.vocab_size
    conc = np.full(V, spec.concentration)
    init = rng.dirichlet(conc)
    transition = np.stack([rng.dirichlet(conc) for _ in range(V)])
    gt = GroundTruthModel(init_dist=init, transition=transition)
    return sample_from_chain(gt, spec.count, spec.length, rng), gt


def _paren_completion_counts(length: int) -> list[list[int]]:
    # ways[i][d]: balanced completions of a prefix at position i with d opens
    ways = [[0] * (length + 2) for _ in range(length + 1)]
    ways[length][0] = 1
    for i in range(length - 1, -1, -1):
        for d in range(length + 1):
            total = 0
            if d + 1 <= length:
                total += ways[i + 1][d + 1]
            if d > 0:
                total += ways[i + 1][d - 1]
            ways[i][d] = total
    return ways


def gen_paren_corpus(spec: CorpusSpec, rng: Rng) -> list[np.ndarray]:
    """Uniformly random balanced bracket strings; token 0 opens, 1 closes."""
    if spec.kind != "balanced_parens":
        raise InvalidInputError("spec kind must be balanced_parens")
    if spec.length % 2 != 0:
        raise InvalidInputError("balanced strings need an even length")
    L = spec.length
    ways = _paren_completion_counts(L)
    out = []
    for _ in range(spec.count):
        seq = np.empty(L, dtype=np.int64)
        depth = 0
        for i in range(L):
            n_open = ways[i + 1][depth + 1] if depth + 1 <= L else 0
            n_close = ways[i + 1][depth - 1] if depth > 0 else 0
            p_open = n_open / (n_open + n_close)
            if rng.uniform() < p_open:
                seq[i] = 0
                depth += 1
            else:
                seq[i] = 1
                depth -= 1
        out.append(seq)
    return out


def _gt_to_json(gt: GroundTruthModel | None):
    if gt is None:
        return None
    return {
        "init_dist": gt.init_dist.tolist(),
        "transition": gt.transition.tolist(),
    }


def _gt_from_json(obj) -> GroundTruthModel | None:
    if obj is None:
        return None
    return GroundTruthModel(
        init_dist=np.array(obj["init_dist"], dtype=np.float64),
        transition=np.array(obj["transition"], dtype=np.float64),
    )


def save_corpus(
    path,
    sequences: list[np.ndarray],
    spec: CorpusSpec,
    gt: GroundTruthModel | None = None,
) -> None:
    header = {
        "format": _FORMAT,
        "version": _VERSION,
        "spec": asdict(spec),
        "count": len(sequences),
        "gt": _gt_to_json(gt),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for seq in sequences:
            fh.write(" ".join(str(int(t)) for t in seq) + "\n")


def load_corpus(path) -> tuple[list[np.ndarray], CorpusSpec, GroundTruthModel | None]:
    with open(path, "rb") as fh:
        data = fh.read()
    offset = 0
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line", offset=len(data))
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable header: {exc}", offset=0) from exc
    if not isinstance(header, dict) or header.get("format") != _FORMAT:
        raise FormatError("not a corpus file", offset=0)
    if header.get("version") != _VERSION:
        raise VersionError(
            f"unsupported corpus version {header.get('version')!r}", offset=0
        )
    try:
        spec = CorpusSpec(**header["spec"])
        count = int(header["count"])
        gt = _gt_from_json(header.get("gt"))
    except (KeyError, TypeError, InvalidInputError) as exc:
        raise FormatError(f"bad header fields: {exc}", offset=0) from exc

    offset = nl + 1
    sequences = []
    for i in range(count):
        nl = data.find(b"\n", offset)
        if nl < 0:
            raise FormatError(f"truncated: expected {count} sequences, found {i}", offset=offset)
        line = data[offset:nl]
        try:
            seq = np.array([int(v) for v in line.split()], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"bad sequence line: {exc}", offset=offset) from exc
        if seq.size == 0:
            raise FormatError("empty sequence line", offset=offset)
        sequences.append(seq)
        offset = nl + 1
    if offset != len(data):
        raise FormatError("trailing bytes after final sequence", offset=offset)
    return sequences, spec, gt
