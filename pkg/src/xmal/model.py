"""The trainable dual-stream model: encoder stacks, factor projection banks,
and the confidence head, with per-pair and all-pairs scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention, autodiff as ad, encoders, factors, objective
from .attention import AttentionConfig
from .confidence import (
    SQUASHES,
    factor_pair_similarity,
    factor_pair_similarity_matrix,
    init_confidence_params,
)
from .autodiff import Tensor
from .config import subsystem_rng
from .errors import ConfigError, DimensionError
from .factors import FactorSet


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int
    factor_count: int = 8
    hidden: int | None = None  # confidence hidden width; defaults to D/K
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    squash: str = "logistic"

    def __post_init__(self):
        factors.factor_width(self.embed_dim, self.factor_count)
        if self.squash not in SQUASHES:
            raise ConfigError(f"squash must be one of {SQUASHES}, got {self.squash!r}")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {self.hidden}")

    @property
    def factor_dim(self) -> int:
        return self.embed_dim // self.factor_count

    @property
    def hidden_width(self) -> int:
        return self.hidden if self.hidden is not None else self.factor_dim


@dataclass
class EncodedBatch:
    """Batched encoder outputs: 3 level tensors and a global per modality."""

    audio_levels: list[Tensor]  # (B, M_l, D) each
    audio_global: Tensor  # (B, D)
    text_levels: list[Tensor]  # (B, N, D) each
    text_global: Tensor  # (B, D)

    @property
    def batch(self) -> int:
        return self.audio_global.value.shape[0]


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "Model":
        rng = subsystem_rng(seed, "init")
        params: dict[str, Tensor] = {}
        params.update(encoders.init_text_params(cfg.embed_dim, rng))
        params.update(encoders.init_audio_params(cfg.embed_dim, rng))
        params.update(factors.init_factor_params(cfg.embed_dim, cfg.factor_count, rng, "factors.text"))
        params.update(factors.init_factor_params(cfg.embed_dim, cfg.factor_count, rng, "factors.audio"))
        params.update(init_confidence_params(cfg.factor_dim, cfg.hidden_width, rng))
        return cls(cfg, params)

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def factor_bank(self, modality: str) -> list[Tensor]:
        return [self.params[f"factors.{modality}.k{i}"] for i in range(self.cfg.factor_count)]

    # -- per-item path ------------------------------------------------------

    def encode_text(self, tokens) -> encoders.TokenBlockSet:
        return encoders.encode_text(tokens, self.params)

    def encode_audio(self, frames) -> encoders.TokenBlockSet:
        return encoders.encode_audio(frames, self.params)

    def item_factors(self, pooled: Tensor, modality: str) -> list[Tensor]:
        """K factor vectors of one item's pooled (D,) embedding."""
        dim = self.cfg.embed_dim
        col = ad.reshape(pooled, (dim, 1))
        return [
            ad.reshape(ad.matmul(w, col), (self.cfg.factor_dim,))
            for w in self.factor_bank(modality)
        ]

    def score_pair(self, audio_set, text_set, mode: str) -> Tensor:
        """Similarity of one encoded audio item against one encoded text item."""
        total = None
        for component in objective.mode_components(mode):
            if component == "DP":
                term = attention.global_similarity(audio_set.pooled, text_set.pooled)
            elif component == "THA":
                term = attention.hierarchical_similarity(audio_set, text_set, self.cfg.attention)
            else:
                term = factor_pair_similarity(
                    self.item_factors(text_set.pooled, "text"),
                    self.item_factors(audio_set.pooled, "audio"),
                    self.params,
                    self.cfg.squash,
                )
            total = term if total is None else ad.add(total, term)
        return total

    # -- batched path --------------------------------------------------------

    def encode_pairs(self, items) -> EncodedBatch:
        """Encode aligned (audio, text) items as one batch."""
        audio = np.stack([np.asarray(it.audio, dtype=np.float64) for it in items])
        text = np.stack([np.asarray(it.text, dtype=np.float64) for it in items])
        return self.encode_arrays(audio, text)

    def encode_arrays(self, audio: np.ndarray, text: np.ndarray) -> EncodedBatch:
        a_levels, a_global = encoders.encode_audio_batch(audio, self.params)
        t_levels, t_global = encoders.encode_text_batch(text, self.params)
        return EncodedBatch(
            audio_levels=a_levels,
            audio_global=a_global,
            text_levels=t_levels,
            text_global=t_global,
        )

    def batch_factors(self, encoded: EncodedBatch) -> tuple[FactorSet, FactorSet]:
        """Raw (unstandardized) factor sets of the batch globals: (text, audio)."""
        return (
            factors.project_factors(encoded.text_global, self.factor_bank("text"), "text"),
            factors.project_factors(encoded.audio_global, self.factor_bank("audio"), "audio"),
        )

    def similarity_matrix(self, encoded: EncodedBatch, mode: str) -> Tensor:
        """All-pairs similarity under `mode`; entry (i, j) is audio i vs text j."""
        total = None
        for component in objective.mode_components(mode):
            term = self.component_matrix(encoded, component)
            total = term if total is None else ad.add(total, term)
        return total

    def component_matrix(self, encoded: EncodedBatch, component: str) -> Tensor:
        if component == "DP":
            return attention.global_similarity_matrix(encoded.audio_global, encoded.text_global)
        if component == "THA":
            return attention.hierarchical_similarity_matrix(
                encoded.audio_levels, encoded.text_levels, self.cfg.attention
            )
        if component == "DCR":
            text_fs, audio_fs = self.batch_factors(encoded)
            return factor_pair_similarity_matrix(
                text_fs.factors, audio_fs.factors, self.params, self.cfg.squash
            )
        raise ConfigError(f"unknown similarity component {component!r}")

    def check_embedding_dim(self, dim: int):
        if dim != self.cfg.embed_dim:
            raise DimensionError(
                f"embedding width {dim} does not match model width {self.cfg.embed_dim}"
            )
