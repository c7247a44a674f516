"""Toy trainable dual-stream encoders.

Each stream is a stack of residual token-wise blocks, y = x + relu(x W + b).
The text stream has 12 blocks tapped after blocks 4, 10 and 12. The audio
stream has 4 stages of (2, 2, 6, 2) blocks with pair-merging of tokens at the
entry of stages 2-4, tapped at the same cumulative block depths (4, 10, 12);
stage 1 output is discarded. Each stream also yields a pooled global vector:
a content-scored softmax readout for text, the token mean for audio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

TEXT_BLOCKS = 12
TEXT_TAPS = (4, 10, 12)
AUDIO_STAGE_BLOCKS = (2, 2, 6, 2)
LEVEL_NAMES = ("low", "mid", "high")
MIN_AUDIO_TOKENS = 4


@dataclass
class TokenBlockSet:
    """Per-item token matrices at the three tap depths plus a pooled vector."""

    levels: list[Tensor]  # low, mid, high; each (tokens, D)
    pooled: Tensor  # (D,)
    modality: str

    def __post_init__(self):
        if len(self.levels) != len(LEVEL_NAMES):
            raise ContractError(f"expected {len(LEVEL_NAMES)} levels, got {len(self.levels)}")


def audio_tap_counts(m: int) -> tuple[int, int, int]:
    """Token counts at the three audio taps for an input of m tokens."""
    m2 = math.ceil(m / 2)
    m3 = math.ceil(m2 / 2)
    m4 = math.ceil(m3 / 2)
    return m2, m3, m4


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_text_params(dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i in range(1, TEXT_BLOCKS + 1):
        params[f"text.block{i:02d}.w"] = ad.parameter(
            _uniform(rng, (dim, dim), dim), f"text.block{i:02d}.w"
        )
        params[f"text.block{i:02d}.b"] = ad.parameter(np.zeros(dim), f"text.block{i:02d}.b")
    params["text.readout"] = ad.parameter(np.zeros(dim), "text.readout")
    return params


def init_audio_params(dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i in range(1, sum(AUDIO_STAGE_BLOCKS) + 1):
        params[f"audio.block{i:02d}.w"] = ad.parameter(
            _uniform(rng, (dim, dim), dim), f"audio.block{i:02d}.w"
        )
        params[f"audio.block{i:02d}.b"] = ad.parameter(np.zeros(dim), f"audio.block{i:02d}.b")
    # Identity start keeps merged tokens in the same space as text tokens;
    # a small random map here would scramble directions before training begins.
    for s in (2, 3, 4):
        params[f"audio.merge{s}.w"] = ad.parameter(np.eye(dim), f"audio.merge{s}.w")
    return params


def _block(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(x, ad.hinge(ad.add(ad.matmul(x, w), b)))


def _pair_mean_matrix(m: int) -> np.ndarray:
    """(ceil(m/2), m) map averaging adjacent token pairs; odd tail kept as-is."""
    m2 = math.ceil(m / 2)
    p = np.zeros((m2, m))
    for r in range(m2):
        lo = 2 * r
        hi = min(lo + 2, m)
        p[r, lo:hi] = 1.0 / (hi - lo)
    return p


def text_readout(tokens: Tensor, weights: Tensor) -> Tensor:
    """Content-scored softmax pooling over token rows: invariant to row order."""
    n, dim = tokens.value.shape
    scores = ad.matmul(tokens, weights.reshape(dim, 1)).reshape(1, n)
    attn = ad.row_softmax(scores, 1.0)
    return ad.matmul(attn, tokens).reshape(dim)


def encode_text(tokens, params: dict[str, Tensor]) -> TokenBlockSet:
    """Run the text stack over an (N, D) token matrix."""
    x = ad.as_tensor(tokens)
    if x.value.ndim != 2 or x.value.shape[0] < 1:
        raise ContractError(f"text input must be a non-empty (N, D) matrix, got {x.value.shape}")
    taps = []
    for i in range(1, TEXT_BLOCKS + 1):
        x = _block(x, params[f"text.block{i:02d}.w"], params[f"text.block{i:02d}.b"])
        if i in TEXT_TAPS:
            taps.append(x)
    pooled = text_readout(x, params["text.readout"])
    return TokenBlockSet(levels=taps, pooled=pooled, modality="text")


def encode_audio(frames, params: dict[str, Tensor]) -> TokenBlockSet:
    """Run the audio stack over an (M, D) frame matrix, M >= 4."""
    x = ad.as_tensor(frames)
    if x.value.ndim != 2 or x.value.shape[0] < MIN_AUDIO_TOKENS:
        raise ContractError(
            f"audio input too short: need at least {MIN_AUDIO_TOKENS} tokens, got shape {x.value.shape}"
        )
    taps = []
    block = 0
    for stage, n_blocks in enumerate(AUDIO_STAGE_BLOCKS, start=1):
        if stage > 1:
            merge = ad.Tensor(_pair_mean_matrix(x.value.shape[0]))
            x = ad.matmul(ad.matmul(merge, x), params[f"audio.merge{stage}.w"])
        for _ in range(n_blocks):
            block += 1
            x = _block(x, params[f"audio.block{block:02d}.w"], params[f"audio.block{block:02d}.b"])
        if stage > 1:
            taps.append(x)
    m_final = x.value.shape[0]
    pooled = ad.reduce_sum(ad.mul(x, 1.0 / m_final), axis=0)
    return TokenBlockSet(levels=taps, pooled=pooled, modality="audio")


# -- batched variants ---------------------------------------------------------
#
# The residual blocks act token-wise, so a whole batch can run as one tall
# matrix. These produce (B, tokens, D) level tensors and (B, D) globals and
# agree with the per-item functions up to blocked-matmul rounding.


def encode_text_batch(tokens: np.ndarray, params: dict[str, Tensor]) -> tuple[list[Tensor], Tensor]:
    """tokens (B, N, D) -> ([3 x (B, N, D)], (B, D))."""
    b, n, dim = tokens.shape
    x = ad.Tensor(tokens.reshape(b * n, dim))
    taps = []
    for i in range(1, TEXT_BLOCKS + 1):
        x = _block(x, params[f"text.block{i:02d}.w"], params[f"text.block{i:02d}.b"])
        if i in TEXT_TAPS:
            taps.append(x.reshape(b, n, dim))
    x3 = x.reshape(b, n, dim)
    scores = ad.einsum("bnd,d->bn", x3, params["text.readout"])
    attn = ad.row_softmax(scores, 1.0)
    pooled = ad.einsum("bn,bnd->bd", attn, x3)
    return taps, pooled


def encode_audio_batch(frames: np.ndarray, params: dict[str, Tensor]) -> tuple[list[Tensor], Tensor]:
    """frames (B, M, D) -> ([3 x (B, M_l, D)], (B, D))."""
    b, m, dim = frames.shape
    if m < MIN_AUDIO_TOKENS:
        raise ContractError(
            f"audio input too short: need at least {MIN_AUDIO_TOKENS} tokens, got {m}"
        )
    x = ad.Tensor(frames.reshape(b * m, dim))
    taps = []
    block = 0
    tokens_now = m
    for stage, n_blocks in enumerate(AUDIO_STAGE_BLOCKS, start=1):
        if stage > 1:
            p = _pair_mean_matrix(tokens_now)
            merge = ad.Tensor(np.kron(np.eye(b), p))
            x = ad.matmul(ad.matmul(merge, x), params[f"audio.merge{stage}.w"])
            tokens_now = p.shape[0]
        for _ in range(n_blocks):
            block += 1
            x = _block(x, params[f"audio.block{block:02d}.w"], params[f"audio.block{block:02d}.b"])
        if stage > 1:
            taps.append(x.reshape(b, tokens_now, dim))
    pooled = ad.reduce_sum(ad.mul(x.reshape(b, tokens_now, dim), 1.0 / tokens_now), axis=1)
    return taps, pooled
