"""Stacked cross attention between two token sequences and the similarity
scores built from it.

Token-to-token cosine similarities are clamped at zero and L2-normalized per
context column, softmaxed into attention weights, and used to fuse context
rows for each query row. A block's score is the sum of query/fused cosines;
the hierarchical score adds the three tap levels. A separate global score is
the plain cosine of the two pooled vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import EPS, Tensor
from .errors import ContractError, DimensionError

DIRECTIONS = ("text_enhanced", "audio_enhanced", "both")
COMBINES = ("mean", "sum")


@dataclass(frozen=True)
class AttentionConfig:
    temperature: float = 9.0  # sharpness applied to normalized similarities
    direction: str = "both"
    combine: str = "mean"  # how the two directions merge when direction == both
    eps: float = EPS

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError(f"attention temperature must be positive, got {self.temperature}")
        if self.direction not in DIRECTIONS:
            raise ContractError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.combine not in COMBINES:
            raise ContractError(f"combine must be one of {COMBINES}, got {self.combine!r}")


def token_word_similarity(queries, contexts, eps: float = EPS) -> Tensor:
    """(M, D) x (N, D) -> (M, N) matrix of pairwise row cosines."""
    q, c = ad.as_tensor(queries), ad.as_tensor(contexts)
    if q.value.ndim != 2 or c.value.ndim != 2 or q.value.shape[1] != c.value.shape[1]:
        raise DimensionError(
            f"token similarity needs matching widths; got {q.value.shape} and {c.value.shape}"
        )
    return ad.matmul(ad.normalize_rows(q, eps), ad.transpose(ad.normalize_rows(c, eps)))


def hinge_normalize(s, eps: float = EPS) -> Tensor:
    """Clamp at zero, then scale each column to unit L2 norm.

    Columns with no positive entry stay all-zero (the guarded denominator
    never divides by less than eps).
    """
    h = ad.hinge(s)
    return ad.div(h, ad.guarded_norm(h, axis=0, keepdims=True, eps=eps))


def attend(queries, contexts, cfg: AttentionConfig) -> Tensor:
    """Fuse context rows for each query row; output rows are convex
    combinations of context rows."""
    q, c = ad.as_tensor(queries), ad.as_tensor(contexts)
    if q.value.shape[0] < 1 or c.value.shape[0] < 1:
        raise ContractError("attend needs at least one query and one context row")
    sbar = hinge_normalize(token_word_similarity(q, c, cfg.eps), cfg.eps)
    alpha = ad.row_softmax(sbar, cfg.temperature)
    return ad.matmul(alpha, c)


def block_similarity(queries, fused, eps: float = EPS) -> Tensor:
    """Sum of row-wise cosines between a query matrix and its fused matrix."""
    q, f = ad.as_tensor(queries), ad.as_tensor(fused)
    if q.value.shape != f.value.shape:
        raise DimensionError(f"shape mismatch: {q.value.shape} vs {f.value.shape}")
    return ad.reduce_sum(ad.mul(ad.normalize_rows(q, eps), ad.normalize_rows(f, eps)))


def _directional_score(queries, contexts, cfg: AttentionConfig) -> Tensor:
    return block_similarity(queries, attend(queries, contexts, cfg), cfg.eps)


def hierarchical_similarity(audio, text, cfg: AttentionConfig) -> Tensor:
    """Sum over tap levels of the direction-combined cross-attention score.

    `audio` and `text` carry 3 matching tap levels (TokenBlockSet or plain
    lists). With direction "both" the text-enhanced and audio-enhanced scores
    merge per level via cfg.combine.
    """
    audio_levels = audio.levels if hasattr(audio, "levels") else list(audio)
    text_levels = text.levels if hasattr(text, "levels") else list(text)
    if len(audio_levels) != len(text_levels):
        raise ContractError(
            f"level mismatch: {len(audio_levels)} audio vs {len(text_levels)} text"
        )
    total = None
    for a_l, t_l in zip(audio_levels, text_levels):
        if cfg.direction == "text_enhanced":
            score = _directional_score(a_l, t_l, cfg)
        elif cfg.direction == "audio_enhanced":
            score = _directional_score(t_l, a_l, cfg)
        else:
            both = ad.add(_directional_score(a_l, t_l, cfg), _directional_score(t_l, a_l, cfg))
            score = ad.mul(both, 0.5) if cfg.combine == "mean" else both
        total = score if total is None else ad.add(total, score)
    return total


def global_similarity(a_vec, t_vec, eps: float = EPS) -> Tensor:
    """Cosine of the two pooled vectors."""
    an = ad.l2_normalize(ad.as_tensor(a_vec), eps)
    tn = ad.l2_normalize(ad.as_tensor(t_vec), eps)
    return ad.reduce_sum(ad.mul(an, tn))


# -- all-pairs (B x B) variants ----------------------------------------------
#
# Used for batch losses and retrieval matrices. Entry (i, j) scores audio
# item i against text item j; equivalent to calling the per-pair functions on
# every (i, j) up to reduction-order rounding.


def _normalize_last(t: Tensor, eps: float) -> Tensor:
    return ad.normalize_rows(t, eps)


def _enhanced_scores(
    s4: Tensor, queries_n: Tensor, contexts_raw: Tensor, cfg: AttentionConfig,
    fuse_pattern: str, cos_pattern: str,
) -> Tensor:
    """Shared core of one attention direction over all pairs.

    s4 is (B, B, Q, C) with query axis 2 and context axis 3; queries_n is the
    row-normalized query tensor and contexts_raw the raw context tensor.
    """
    h = ad.hinge(s4)
    sbar = ad.div(h, ad.guarded_norm(h, axis=2, keepdims=True, eps=cfg.eps))
    alpha = ad.row_softmax(sbar, cfg.temperature)
    fused = ad.einsum(fuse_pattern, alpha, contexts_raw)
    fused_n = _normalize_last(fused, cfg.eps)
    return ad.reduce_sum(ad.einsum(cos_pattern, queries_n, fused_n), axis=2)


def hierarchical_similarity_matrix(
    audio_levels: list[Tensor], text_levels: list[Tensor], cfg: AttentionConfig
) -> Tensor:
    """All-pairs hierarchical score from (B, M_l, D) and (B, N, D) level tensors."""
    total = None
    for a3, t3 in zip(audio_levels, text_levels):
        an = _normalize_last(a3, cfg.eps)
        tn = _normalize_last(t3, cfg.eps)
        s4 = ad.einsum("imd,jnd->ijmn", an, tn)
        if cfg.direction in ("text_enhanced", "both"):
            te = _enhanced_scores(s4, an, t3, cfg, "ijmn,jnd->ijmd", "imd,ijmd->ijm")
        if cfg.direction in ("audio_enhanced", "both"):
            s4_swapped = ad.permute(s4, (0, 1, 3, 2))
            ae = _enhanced_scores(s4_swapped, tn, a3, cfg, "ijnm,imd->ijnd", "jnd,ijnd->ijn")
        if cfg.direction == "text_enhanced":
            score = te
        elif cfg.direction == "audio_enhanced":
            score = ae
        else:
            both = ad.add(te, ae)
            score = ad.mul(both, 0.5) if cfg.combine == "mean" else both
        total = score if total is None else ad.add(total, score)
    return total


def global_similarity_matrix(a_globals: Tensor, t_globals: Tensor, eps: float = EPS) -> Tensor:
    """All-pairs cosine of pooled vectors: (B, D) x (B, D) -> (B, B)."""
    an = ad.normalize_rows(a_globals, eps)
    tn = ad.normalize_rows(t_globals, eps)
    return ad.matmul(an, ad.transpose(tn))
