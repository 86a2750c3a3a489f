"""Tiny bidirectional sequence denoiser with reverse-mode gradients.

The network maps a (partially masked) token sequence to a per-position
distribution over the alphabet. Mask and pad scores are forced to -inf
before normalization, so their probability is exactly zero; EOS is an
ordinary generable token. Conditioning, when configured, is an additive
learned embedding summed into every position; label id ``cond_vocab`` is the
reserved unconditional label.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .core import FormatError, InvalidInputError, NumericError, Rng, VersionError, Vocabulary

__all__ = [
    "DenoiserConfig",
    "DenoiserOutput",
    "Denoiser",
    "apply_copy_over",
    "argmax_decode",
    "compute_gradients",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"PSC1"
_LN_EPS = 1e-5


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int  # ordinary tokens; alphabet adds mask/eos/pad
    width: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    max_len: int = 128
    cond_vocab: int = 0  # 0 = unconditional-only model
    copy_over: bool = True

    def __post_init__(self):
        if self.n_blocks not in (1, 2):
            raise InvalidInputError("n_blocks must be 1 or 2")
        if self.width % self.n_heads != 0:
            raise InvalidInputError("width must be divisible by n_heads")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocab_size)

    @property
    def alphabet_size(self) -> int:
        return self.vocab_size + 3


@dataclass
class DenoiserOutput:
    """Per-position probabilities plus the raw pre-softmax scores.

    ``probs``/``scores`` have shape (L, A) for a single sequence or (B, L, A)
    for a batch. ``graph`` holds the log-probability autodiff node when the
    forward pass recorded one.
    """

    probs: np.ndarray
    scores: np.ndarray
    graph: ad.Tensor | None = field(default=None, repr=False)


def _init_params(cfg: DenoiserConfig, rng: Rng) -> dict[str, np.ndarray]:
    d = cfg.width
    A = cfg.alphabet_size

    def uniform(shape, bound):
        return (rng.uniforms(int(np.prod(shape))).reshape(shape) * 2.0 - 1.0) * bound

    def fan_in(shape):
        return uniform(shape, 1.0 / np.sqrt(shape[0]))

    emb_bound = 1.0 / np.sqrt(d)
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = uniform((A, d), emb_bound)
    p["pos_emb"] = uniform((cfg.max_len, d), emb_bound)
    if cfg.cond_vocab > 0:
        p["cond_emb"] = uniform((cfg.cond_vocab + 1, d), emb_bound)
    for i in range(cfg.n_blocks):
        pre = f"blk{i}."
        p[pre + "ln1.gain"] = np.ones(d)
        p[pre + "ln1.bias"] = np.zeros(d)
        for nm in ("wq", "wk", "wv", "wo"):
            p[pre + nm] = fan_in((d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            p[pre + nm] = np.zeros(d)
        p[pre + "ln2.gain"] = np.ones(d)
        p[pre + "ln2.bias"] = np.zeros(d)
        p[pre + "w1"] = fan_in((d, 4 * d))
        p[pre + "b1"] = np.zeros(4 * d)
        p[pre + "w2"] = fan_in((4 * d, d))
        p[pre + "b2"] = np.zeros(d)
    p["lnf.gain"] = np.ones(d)
    p["lnf.bias"] = np.zeros(d)
    # zero output projection: fresh models emit exactly uniform rows
    p["out_w"] = np.zeros((d, A))
    p["out_b"] = np.zeros(A)
    return p


class Denoiser:
    """Parameter container plus forward passes (plain and graph-recording)."""

    def __init__(self, cfg: DenoiserConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        vocab = cfg.vocab
        col_mask = np.zeros(cfg.alphabet_size)
        col_mask[vocab.mask_id] = -np.inf
        col_mask[vocab.pad_id] = -np.inf
        self._col_mask = col_mask

    @classmethod
    def init(cls, cfg: DenoiserConfig, rng: Rng) -> "Denoiser":
        return cls(cfg, _init_params(cfg, rng))

    @property
    def vocab(self) -> Vocabulary:
        return self.cfg.vocab

    def clone(self) -> "Denoiser":
        return Denoiser(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def leaves(self) -> dict[str, ad.Tensor]:
        """Fresh graph leaves over the current parameters (shared by passes)."""
        return {k: ad.leaf(v, name=k) for k, v in self.params.items()}

    def _resolve_condition(self, condition: int | None) -> int | None:
        if self.cfg.cond_vocab == 0:
            if condition is not None:
                raise InvalidInputError("model was built without conditioning")
            return None
        if condition is None:
            return self.cfg.cond_vocab  # unconditional label
        if not 0 <= condition <= self.cfg.cond_vocab:
            raise InvalidInputError(f"condition id {condition} out of range")
        return int(condition)

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.shape[-1] > self.cfg.max_len:
            raise InvalidInputError(
                f"sequence length {tokens.shape[-1]} exceeds max_len {self.cfg.max_len}"
            )
        return tokens

    # --- plain (no-graph) forward, used by samplers -----------------------

    def forward(self, tokens: np.ndarray, condition: int | None = None) -> DenoiserOutput:
        from . import kernels

        tokens = self._check_tokens(tokens)
        p = self.params
        cfg = self.cfg
        cid = self._resolve_condition(condition)
        L = tokens.shape[-1]

        h = p["tok_emb"][tokens] + p["pos_emb"][:L]
        if cid is not None:
            h = h + p["cond_emb"][cid]
        nh, dh = cfg.n_heads, cfg.width // cfg.n_heads
        lead = tokens.shape[:-1]
        for i in range(cfg.n_blocks):
            pre = f"blk{i}."
            a, _, _ = kernels.layernorm_fwd(h, p[pre + "ln1.gain"], p[pre + "ln1.bias"], _LN_EPS)
            q = (a @ p[pre + "wq"] + p[pre + "bq"]).reshape(lead + (L, nh, dh))
            k = (a @ p[pre + "wk"] + p[pre + "bk"]).reshape(lead + (L, nh, dh))
            v = (a @ p[pre + "wv"] + p[pre + "bv"]).reshape(lead + (L, nh, dh))
            q = np.swapaxes(q, -2, -3)  # (..., nh, L, dh)
            k = np.swapaxes(k, -2, -3)
            v = np.swapaxes(v, -2, -3)
            att = kernels.softmax_fwd((q @ np.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)))
            o = np.swapaxes(att @ v, -2, -3).reshape(lead + (L, cfg.width))
            h = h + o @ p[pre + "wo"] + p[pre + "bo"]
            f, _, _ = kernels.layernorm_fwd(h, p[pre + "ln2.gain"], p[pre + "ln2.bias"], _LN_EPS)
            act, _ = kernels.silu_fwd(f @ p[pre + "w1"] + p[pre + "b1"])
            h = h + act @ p[pre + "w2"] + p[pre + "b2"]
        y, _, _ = kernels.layernorm_fwd(h, p["lnf.gain"], p["lnf.bias"], _LN_EPS)
        scores = y @ p["out_w"] + p["out_b"] + self._col_mask
        logp = kernels.log_softmax_fwd(scores)
        return DenoiserOutput(probs=np.exp(logp), scores=scores)

    # --- graph-recording forward, used by training ------------------------

    def forward_graph(
        self,
        leaves: dict[str, ad.Tensor],
        tokens: np.ndarray,
        condition: int | None = None,
    ) -> DenoiserOutput:
        tokens = self._check_tokens(tokens)
        cfg = self.cfg
        cid = self._resolve_condition(condition)
        L = tokens.shape[-1]

        h = ad.gather(leaves["tok_emb"], tokens) + ad.take_rows(leaves["pos_emb"], L)
        if cid is not None:
            h = h + ad.gather(leaves["cond_emb"], np.array(cid))
        nh, dh = cfg.n_heads, cfg.width // cfg.n_heads
        lead = tokens.shape[:-1]
        nlead = len(lead)
        perm = tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2)  # swap L and head axes
        for i in range(cfg.n_blocks):
            pre = f"blk{i}."
            a = ad.layernorm(h, leaves[pre + "ln1.gain"], leaves[pre + "ln1.bias"], _LN_EPS)
            q = ad.linear(a, leaves[pre + "wq"], leaves[pre + "bq"]).reshape(lead + (L, nh, dh)).transpose(perm)
            k = ad.linear(a, leaves[pre + "wk"], leaves[pre + "bk"]).reshape(lead + (L, nh, dh)).transpose(perm)
            v = ad.linear(a, leaves[pre + "wv"], leaves[pre + "bv"]).reshape(lead + (L, nh, dh)).transpose(perm)
            kt = k.transpose(tuple(range(nlead + 1)) + (nlead + 2, nlead + 1))
            att = ad.softmax(q.matmul(kt).scale(1.0 / np.sqrt(dh)))
            o = att.matmul(v).transpose(perm).reshape(lead + (L, cfg.width))
            h = h + ad.linear(o, leaves[pre + "wo"], leaves[pre + "bo"])
            f = ad.layernorm(h, leaves[pre + "ln2.gain"], leaves[pre + "ln2.bias"], _LN_EPS)
            h = h + ad.linear(ad.silu(ad.linear(f, leaves[pre + "w1"], leaves[pre + "b1"])), leaves[pre + "w2"], leaves[pre + "b2"])
        y = ad.layernorm(h, leaves["lnf.gain"], leaves["lnf.bias"], _LN_EPS)
        scores = ad.linear(y, leaves["out_w"], leaves["out_b"])
        scores = ad.add_const(scores, self._col_mask)
        logp = ad.log_softmax(scores)
        return DenoiserOutput(probs=np.exp(logp.value), scores=scores.value, graph=logp)


def apply_copy_over(output: DenoiserOutput, tokens: np.ndarray, vocab: Vocabulary) -> DenoiserOutput:
    """Force point masses on already-unmasked input tokens; masked rows pass through.

    Scores of copied rows become the 0/-inf pattern consistent with the
    one-hot probabilities. Idempotent.
    """
    tokens = np.asarray(tokens)
    if output.probs.shape[:-1] != tokens.shape:
        raise InvalidInputError("output and tokens disagree on sequence shape")
    keep = tokens != vocab.mask_id
    if not np.any(keep):
        return DenoiserOutput(probs=output.probs.copy(), scores=output.scores.copy())
    probs = output.probs.copy()
    scores = output.scores.copy()
    idx = np.nonzero(keep)
    probs[idx] = 0.0
    probs[idx + (tokens[idx],)] = 1.0
    scores[idx] = -np.inf
    scores[idx + (tokens[idx],)] = 0.0
    return DenoiserOutput(probs=probs, scores=scores)


def argmax_decode(output: DenoiserOutput) -> np.ndarray:
    """Highest-probability token per position; ties resolve to the lowest id."""
    return np.argmax(output.probs, axis=-1)


def compute_gradients(
    loss: ad.Tensor, leaves: dict[str, ad.Tensor]
) -> tuple[float, dict[str, np.ndarray]]:
    """Run the reverse sweep and collect per-parameter gradients.

    Parameters the loss never touched get explicit zero blocks.
    """
    ad.backward(loss)
    loss_value = float(loss.value)
    if not np.isfinite(loss_value):
        raise NumericError("loss is non-finite")
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for name, t in leaves.items()
    }
    return loss_value, grads


# --- checkpoint container -------------------------------------------------
#
# Layout: magic "PSC1" | u32 record count | records. Each record is
# u32 name length | name utf-8 | u32 rank | u32 dims[rank] | float32 LE data.
# The first record, "hparams", carries the model configuration.


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    dims = arr.shape
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
    return head + arr.astype("<f4").tobytes()


def save_checkpoint(model: Denoiser, path) -> None:
    cfg = model.cfg
    hparams = np.array(
        [
            cfg.vocab_size,
            cfg.width,
            cfg.n_blocks,
            cfg.n_heads,
            cfg.max_len,
            cfg.cond_vocab,
            1.0 if cfg.copy_over else 0.0,
        ]
    )
    records = [("hparams", hparams)] + sorted(model.params.items())
    blob = CHECKPOINT_MAGIC + struct.pack("<I", len(records))
    for name, arr in records:
        blob += _pack_record(name, np.asarray(arr))
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError("checkpoint truncated", offset=self.off)
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Denoiser:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        if magic[:3] == CHECKPOINT_MAGIC[:3]:
            raise VersionError(f"unsupported checkpoint version {magic!r}", offset=0)
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    n_records = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if r.off != len(data):
        raise FormatError("trailing bytes after final record", offset=r.off)
    if "hparams" not in tensors:
        raise FormatError("checkpoint missing hparams record", offset=len(data))
    h = tensors.pop("hparams")
    cfg = DenoiserConfig(
        vocab_size=int(h[0]),
        width=int(h[1]),
        n_blocks=int(h[2]),
        n_heads=int(h[3]),
        max_len=int(h[4]),
        cond_vocab=int(h[5]),
        copy_over=bool(h[6]),
    )
    return Denoiser(cfg, tensors)
