"""Report decoding: tokenizer, prompt assembly, tiny causal decoder, freezing.

The decoder input is laid out as [retrieved-report tokens, SEP, projected
visual rows, BOS, target tokens]; attention is causal over the whole
sequence, so every text position can see the visual prefix. The language
modeling loss covers exactly the target positions. A tiny two-block decoder
stands behind the frozen-LM seam; after its pretraining phase it never
changes again.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    concat,
    gather_rows,
    layer_norm,
    logsumexp,
    matmul,
    softmax,
    take_per_row,
)

TOKEN_RE = re.compile(r"\w+|[^\w\s]")

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")


def split_words(text):
    return TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Dense token<->id maps; ids 0..4 are the special tokens."""

    def __init__(self, corpus_tokens):
        ordered = list(SPECIAL_TOKENS) + sorted(set(corpus_tokens) - set(SPECIAL_TOKENS))
        self.tokens = ordered
        self.ids = {t: i for i, t in enumerate(ordered)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("vocabulary mapping is not bijective")

    @staticmethod
    def from_corpus(texts):
        seen = set()
        for t in texts:
            seen.update(split_words(t))
        return Vocabulary(seen)

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self.ids.get(token, UNK)


@dataclass
class TokenSequence:
    ids: list
    text: str = ""

    @property
    def interior(self):
        return self.ids[1:-1]


def tokenize(text, vocab):
    """Lowercase, split words and punctuation, wrap in BOS/EOS."""
    ids = [BOS] + [vocab.id(t) for t in split_words(text)] + [EOS]
    return TokenSequence(ids=ids, text=text)


def detokenize(seq, vocab):
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return " ".join(vocab.tokens[i] for i in ids if i >= len(SPECIAL_TOKENS))


def normalize_text(text):
    """The equality notion for round-trips: lowercase, single-space tokens."""
    return " ".join(split_words(text))


# -- decoder -----------------------------------------------------------------------


@dataclass
class DecoderBlock:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    @staticmethod
    def init(rng, width, ff_mult):
        s = 0.02
        hidden = width * ff_mult
        return DecoderBlock(
            Tensor.randn(rng, (width, width), s, requires_grad=True),
            Tensor.randn(rng, (width, width), s, requires_grad=True),
            Tensor.randn(rng, (width, width), s, requires_grad=True),
            Tensor.randn(rng, (width, width), s, requires_grad=True),
            Tensor.randn(rng, (width, hidden), s, requires_grad=True),
            Tensor(np.zeros(hidden), requires_grad=True),
            Tensor.randn(rng, (hidden, width), s, requires_grad=True),
            Tensor(np.zeros(width), requires_grad=True),
        )

    def named(self, prefix):
        return {f"{prefix}/{k}": v for k, v in vars(self).items()}


@dataclass
class DecoderParams:
    width: int
    max_positions: int
    tok_emb: Tensor
    pos_emb: Tensor
    w_prefix: Tensor
    blocks: list = field(default_factory=list)

    @staticmethod
    def init(rng, vocab_size, width, max_positions, n_blocks=2, ff_mult=4):
        return DecoderParams(
            width, max_positions,
            Tensor.randn(rng, (vocab_size, width), 0.02, requires_grad=True),
            Tensor.randn(rng, (max_positions, width), 0.02, requires_grad=True),
            Tensor.randn(rng, (width, width), 0.02, requires_grad=True),
            [DecoderBlock.init(rng, width, ff_mult) for _ in range(n_blocks)],
        )

    def named(self):
        out = {"decoder/tok_emb": self.tok_emb, "decoder/pos_emb": self.pos_emb,
               "decoder/w_prefix": self.w_prefix}
        for i, b in enumerate(self.blocks):
            out.update(b.named(f"decoder/block{i}"))
        return out


_MASK_CACHE = {}


def _causal_mask(n):
    # additive mask: 0 on and below the diagonal, large negative above
    if n not in _MASK_CACHE:
        m = np.triu(np.full((n, n), -1e30), k=1)
        _MASK_CACHE[n] = Tensor(m)
    return _MASK_CACHE[n]


def decoder_hidden(params, x):
    """Run the causal blocks over an embedded sequence (S, width)."""
    n = x.data.shape[0]
    mask = _causal_mask(n)
    scale = 1.0 / math.sqrt(params.width)
    for b in params.blocks:
        h = layer_norm(x)
        scores = matmul(h @ b.wq, (h @ b.wk).transpose()) * scale + mask
        att = matmul(softmax(scores, axis=1), h @ b.wv) @ b.wo
        x = x + att
        h2 = layer_norm(x)
        x = x + ((h2 @ b.ff_w1 + b.ff_b1).gelu() @ b.ff_w2 + b.ff_b2)
    return layer_norm(x)


@dataclass
class AssembledPrompt:
    embeddings: Tensor
    target_ids: np.ndarray
    loss_positions: np.ndarray
    n_prefix: int


def assemble_prompt(params, vocab, retrieved_text, v_proj, target):
    """Build the decoder input [R_ret, SEP, prefix rows, BOS, target[:-1]].

    The final target token is prediction-only; logits at the trailing
    len(target) positions are scored against the full target (which ends
    in EOS).
    """
    r_ids = [vocab.id(t) for t in split_words(retrieved_text)] if retrieved_text else []
    target_ids = np.asarray(list(target.interior) + [EOS], dtype=np.int64)
    input_tail = [BOS] + list(target_ids[:-1])
    prefix = v_proj @ params.w_prefix
    n_prefix = prefix.data.shape[0]
    total = len(r_ids) + 1 + n_prefix + len(input_tail)
    if total > params.max_positions:
        raise ValueError(f"assembled sequence length {total} exceeds "
                         f"maximum {params.max_positions}")
    emb = concat([
        gather_rows(params.tok_emb, r_ids + [SEP]),
        prefix,
        gather_rows(params.tok_emb, input_tail),
    ], axis=0)
    emb = emb + gather_rows(params.pos_emb, np.arange(total))
    loss_positions = np.arange(total - len(target_ids), total)
    return AssembledPrompt(emb, target_ids, loss_positions, n_prefix)


def sequence_logits(params, embeddings):
    return decoder_hidden(params, embeddings) @ params.tok_emb.transpose()


def token_cross_entropy(logits, target_ids):
    """Per-position -log P(target); logits (T, V)."""
    return logsumexp(logits, axis=1) - take_per_row(logits, target_ids)


def lm_loss(params, prompt):
    """(summed, mean-per-token) negative log likelihood over target positions."""
    if len(prompt.target_ids) == 0:
        raise ValueError("empty target sequence")
    logits = sequence_logits(params, prompt.embeddings)
    rows = gather_rows(logits, prompt.loss_positions)
    ce = token_cross_entropy(rows, prompt.target_ids)
    total = ce.sum()
    return total, total * (1.0 / len(prompt.target_ids))


def generate(params, vocab, retrieved_text, v_proj, max_len):
    """Greedy decoding from BOS until EOS or max_len tokens; ties take the
    lowest token id. Returns detokenized text."""
    r_ids = [vocab.id(t) for t in split_words(retrieved_text)] if retrieved_text else []
    prefix = (v_proj @ params.w_prefix).data
    out_ids = []
    while len(out_ids) < max_len:
        tail = [BOS] + out_ids
        total = len(r_ids) + 1 + prefix.shape[0] + len(tail)
        if total > params.max_positions:
            break
        emb_rows = np.concatenate([
            params.tok_emb.data[r_ids + [SEP]],
            prefix,
            params.tok_emb.data[tail],
        ], axis=0)
        emb = Tensor(emb_rows + params.pos_emb.data[:total])
        logits = sequence_logits(params, emb).data[-1]
        nxt = int(np.argmax(logits))
        if nxt == EOS:
            break
        out_ids.append(nxt)
    return detokenize(out_ids, vocab)


# -- freezing ------------------------------------------------------------------------


def apply_freeze(named_params, mask):
    """Set per-parameter trainability; mask keys must cover the params exactly."""
    if set(named_params) != set(mask):
        missing = set(named_params) ^ set(mask)
        raise ValueError(f"freeze mask does not match parameters: {sorted(missing)}")
    for name, tensor in named_params.items():
        tensor.requires_grad = bool(mask[name])


def stage2_freeze_mask(named_params):
    """Stage-2 contract: only the projection matrix and its layer-norm affine train."""
    trainable = {"dvaf/w_proj", "dvaf/proj_gamma", "dvaf/proj_beta"}
    return {name: name in trainable for name in named_params}
