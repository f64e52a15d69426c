"""Projectors, multimodal token assembly, and the toy causal answer scorer.

Canonical segment order within a frame block is fused -> object -> text;
object tokens can instead be merged into the fused stream (or enhanced by
it) via single-head cross-attention before assembly. No separator tokens
are inserted between segments (segment tags carry that structure; a learned
separator would be the alternative). The scorer is the
smallest causal model in which ordering, causality and gradient-flow
properties are nondegenerate: a trainable embedding table, sinusoidal
positions, one masked self-attention block with a small MLP, and a softmax
over a toy vocabulary. Answers are scored teacher-forced; the loss is the
mean negative log-likelihood per answer token.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .fusion import CrossAttentionParams, cross_attention
from .tensor import Tensor, affine, concat, one_hot

log = logging.getLogger(__name__)

SEGMENT_FUSED = "fused"
SEGMENT_OBJECT = "object"
SEGMENT_TEXT = "text"
SEGMENT_ANSWER = "answer"


class MergeMethod(str, Enum):
    CONCAT = "concat"
    F_TO_B_XATTN = "f_to_b_xattn"
    B_TO_F_XATTN = "b_to_f_xattn"


@dataclass(frozen=True)
class AssemblyConfig:
    merge: MergeMethod = MergeMethod.CONCAT
    model_dim: int = 32
    vocab_size: int = 64
    text_first: bool = False  # experimentation flag; canonical order is visual-first
    scorer_hidden: int = 64


@dataclass
class TokenSequence:
    """Ordered multimodal embeddings with per-token segment and frame tags."""

    embeddings: Tensor  # [S, D]
    segments: tuple[str, ...]
    frames: tuple[int, ...]

    def __post_init__(self):
        s = self.embeddings.shape[0]
        if len(self.segments) != s or len(self.frames) != s:
            raise ValueError(
                f"tag lengths ({len(self.segments)}, {len(self.frames)}) != sequence length {s}"
            )

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def segment_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for tag in self.segments:
            counts[tag] = counts.get(tag, 0) + 1
        return counts


def gelu(x: Tensor) -> Tensor:
    # tanh approximation, composed from the primitive op set
    c = math.sqrt(2.0 / math.pi)
    inner = (x + (x * x * x) * 0.044715) * c
    return x * 0.5 * (inner.tanh() + 1.0)


@dataclass
class ProjectorParams:
    """Two-layer MLP mapping a feature width onto the model dimension."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def build(cls, in_dim: int, out_dim: int, gen: np.random.Generator) -> ProjectorParams:
        hidden = out_dim
        return cls(
            w1=Tensor(gen.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, hidden)), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(gen.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, out_dim)), requires_grad=True),
            b2=Tensor(np.zeros(out_dim), requires_grad=True),
        )

    def apply(self, x: Tensor) -> Tensor:
        return affine(gelu(affine(x, self.w1, self.b1)), self.w2, self.b2)

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class ScorerParams:
    """Embedding table, one causal attention block, and the vocab head."""

    embed: Tensor  # [vocab, D]
    wq: Tensor
    wk: Tensor
    wv: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    out_w: Tensor  # [D, vocab]
    out_b: Tensor

    @classmethod
    def build(cls, cfg: AssemblyConfig, gen: np.random.Generator) -> ScorerParams:
        d, v, h = cfg.model_dim, cfg.vocab_size, cfg.scorer_hidden
        s = 1.0 / math.sqrt(d)
        return cls(
            embed=Tensor(gen.normal(0.0, 0.5, size=(v, d)), requires_grad=True),
            wq=Tensor(gen.normal(0.0, s, size=(d, d)), requires_grad=True),
            wk=Tensor(gen.normal(0.0, s, size=(d, d)), requires_grad=True),
            wv=Tensor(gen.normal(0.0, s, size=(d, d)), requires_grad=True),
            ffn_w1=Tensor(gen.normal(0.0, s, size=(d, h)), requires_grad=True),
            ffn_b1=Tensor(np.zeros(h), requires_grad=True),
            ffn_w2=Tensor(gen.normal(0.0, 1.0 / math.sqrt(h), size=(h, d)), requires_grad=True),
            ffn_b2=Tensor(np.zeros(d), requires_grad=True),
            out_w=Tensor(gen.normal(0.0, s, size=(d, v)), requires_grad=True),
            out_b=Tensor(np.zeros(v), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "embed": self.embed, "wq": self.wq, "wk": self.wk, "wv": self.wv,
            "ffn_w1": self.ffn_w1, "ffn_b1": self.ffn_b1,
            "ffn_w2": self.ffn_w2, "ffn_b2": self.ffn_b2,
            "out_w": self.out_w, "out_b": self.out_b,
        }


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _row_tags(tag: str, count: int, frame: int) -> tuple[tuple[str, ...], tuple[int, ...]]:
    return (tag,) * count, (frame,) * count


def assemble(
    e_fused: Tensor,
    e_objects: Tensor,
    e_text: Tensor,
    merge: MergeMethod = MergeMethod.CONCAT,
    merge_params: CrossAttentionParams | None = None,
    text_first: bool = False,
    frame: int = 0,
) -> TokenSequence:
    """Build one frame's token sequence from projected streams.

    All inputs must already share the model width. ``concat`` appends object
    tokens after the fused ones; ``f_to_b_xattn`` folds object information
    into the fused tokens (objects are consumed, not emitted);
    ``b_to_f_xattn`` enhances object tokens from the fused stream and keeps
    both. With no objects the attention variants skip the merge entirely.
    """
    d = e_fused.shape[1]
    for name, t in (("object", e_objects), ("text", e_text)):
        if t.shape[1] != d and t.shape[0] > 0:
            raise ValueError(f"{name} stream width {t.shape[1]} != model dim {d}")
    k = e_objects.shape[0]
    if k == 0 and merge is not MergeMethod.CONCAT:
        log.info("no object tokens: %s merge degenerates to the fused stream", merge.value)
    blocks: list[tuple[str, Tensor]] = []
    if merge is MergeMethod.F_TO_B_XATTN:
        enhanced = cross_attention(e_fused, e_objects, merge_params) if k > 0 else e_fused
        blocks.append((SEGMENT_FUSED, enhanced))
    elif merge is MergeMethod.B_TO_F_XATTN:
        blocks.append((SEGMENT_FUSED, e_fused))
        if k > 0:
            blocks.append((SEGMENT_OBJECT, cross_attention(e_objects, e_fused, merge_params)))
    else:
        blocks.append((SEGMENT_FUSED, e_fused))
        if k > 0:
            blocks.append((SEGMENT_OBJECT, e_objects))
    text_block = [(SEGMENT_TEXT, e_text)] if e_text.shape[0] > 0 else []
    ordered = text_block + blocks if text_first else blocks + text_block
    segments: list[str] = []
    frames: list[int] = []
    for tag, t in ordered:
        seg, frm = _row_tags(tag, t.shape[0], frame)
        segments.extend(seg)
        frames.extend(frm)
    emb = concat([t for _, t in ordered], axis=0)
    return TokenSequence(embeddings=emb, segments=tuple(segments), frames=tuple(frames))


def assemble_video(
    frame_streams: list[tuple[Tensor, Tensor]],
    e_text: Tensor,
    merge: MergeMethod = MergeMethod.CONCAT,
    merge_params: CrossAttentionParams | None = None,
) -> TokenSequence:
    """Concatenate per-frame [fused; object] blocks, one trailing text segment."""
    if not frame_streams:
        raise ValueError("video assembly requires at least one frame")
    parts: list[TokenSequence] = []
    for f, (e_fused, e_objects) in enumerate(frame_streams):
        empty_text = Tensor(np.zeros((0, e_fused.shape[1])))
        parts.append(assemble(e_fused, e_objects, empty_text, merge, merge_params, frame=f))
    segments = tuple(tag for p in parts for tag in p.segments) + (SEGMENT_TEXT,) * e_text.shape[0]
    frames = tuple(f for p in parts for f in p.frames) + (-1,) * e_text.shape[0]
    pieces = [p.embeddings for p in parts]
    if e_text.shape[0] > 0:
        pieces.append(e_text)
    return TokenSequence(embeddings=concat(pieces, axis=0), segments=segments, frames=frames)


def causal_hidden(full: Tensor, p: ScorerParams) -> Tensor:
    """One causal self-attention block plus MLP over [T, D] embeddings."""
    t, d = full.shape
    q = full @ p.wq
    k = full @ p.wk
    v = full @ p.wv
    scores = (q @ k.T) * (1.0 / math.sqrt(d))
    mask = np.triu(np.full((t, t), -1e9), k=1)  # strictly-upper: future positions
    weights = (scores + Tensor(mask)).softmax(axis=-1)
    x = full + weights @ v
    return x + affine(gelu(affine(x, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2)


def scorer_logits(prefix: Tensor, answer_ids: list[int], p: ScorerParams) -> Tensor:
    """Teacher-forced logits [L, vocab]: row i predicts answer token i."""
    vocab = p.embed.shape[0]
    answer_emb = one_hot(answer_ids, vocab) @ p.embed
    full = concat([prefix, answer_emb], axis=0)
    full = full + Tensor(sinusoidal_positions(full.shape[0], full.shape[1]))
    hidden = causal_hidden(full, p)
    s = prefix.shape[0]
    # the state just before each answer token carries its prediction
    pred_states = hidden.narrow(0, s - 1, len(answer_ids))
    return affine(pred_states, p.out_w, p.out_b)


def score_answer(seq: TokenSequence, answer_ids: list[int], p: ScorerParams) -> Tensor:
    """Mean NLL of the answer under teacher forcing, as a scalar tensor."""
    if len(answer_ids) == 0:
        raise ValueError("cannot score an empty answer")
    logits = scorer_logits(seq.embeddings, answer_ids, p)
    log_probs = logits.log_softmax(axis=-1)
    picked = (log_probs * one_hot(answer_ids, p.embed.shape[0])).sum(axis=1)
    return -picked.mean()


def greedy_decode(seq: TokenSequence, p: ScorerParams, max_new: int, stop_id: int | None = None) -> list[int]:
    """Argmax continuation of the sequence; deterministic, no sampling.

    Each step re-runs the block over [prefix; generated; dummy]; the causal
    mask guarantees the dummy token cannot influence its own prediction row.
    """
    generated: list[int] = []
    for _ in range(max_new):
        logits = scorer_logits(seq.embeddings, generated + [0], p)
        next_id = int(np.argmax(logits.data[len(generated)]))
        generated.append(next_id)
        if stop_id is not None and next_id == stop_id:
            break
    return generated
