"""Latent-factor decomposition of pooled embeddings and the covariance-based
decoupling/alignment losses.

A global D-vector splits into K factors of width D/K through per-factor
trainable projections. Factors are standardized per dimension over the batch
(biased variance), and the K x K cross-modal covariance is the mean over
batch and dimension of products of standardized factors, so perfectly
correlated factors read exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, Tensor
from .errors import BatchTooSmallError, ConfigError, DimensionError

DIAG_GUARD = 1e-8  # column-sum magnitude below which match probabilities are undefined


@dataclass
class FactorSet:
    """A batch of K factor matrices, each (B, D/K)."""

    factors: list[Tensor]
    modality: str

    @property
    def count(self) -> int:
        return len(self.factors)

    @property
    def batch(self) -> int:
        return self.factors[0].value.shape[0]

    @property
    def width(self) -> int:
        return self.factors[0].value.shape[1]


def factor_width(dim: int, k: int) -> int:
    if k < 1 or dim % k != 0:
        raise ConfigError(f"embed dim {dim} must be divisible by factor count {k}")
    return dim // k


def init_factor_params(
    dim: int, k: int, rng: np.random.Generator, prefix: str
) -> dict[str, Tensor]:
    width = factor_width(dim, k)
    bound = 1.0 / np.sqrt(dim)
    params = {}
    for i in range(k):
        name = f"{prefix}.k{i}"
        params[name] = ad.parameter(rng.uniform(-bound, bound, size=(width, dim)), name)
    return params


def project_factors(globals_: Tensor, bank: list[Tensor], modality: str) -> FactorSet:
    """(B, D) globals through K (D/K, D) projections -> FactorSet."""
    g = ad.as_tensor(globals_)
    if g.value.ndim != 2 or g.value.shape[0] < 1:
        raise DimensionError(f"globals must be (B, D), got {g.value.shape}")
    factor_width(g.value.shape[1], len(bank))  # validates divisibility
    return FactorSet(
        factors=[ad.matmul(g, ad.transpose(w)) for w in bank],
        modality=modality,
    )


def batch_standardize(fs: FactorSet, eps: float = EPS) -> FactorSet:
    """Whiten each factor dimension over the batch to mean 0, variance 1.

    Biased (1/B) variance keeps self-covariance exactly 1; a constant
    dimension maps to zeros through the eps guard.
    """
    b = fs.batch
    if b < 2:
        raise BatchTooSmallError(f"standardization needs a batch of >= 2, got {b}")
    out = []
    inv_b = 1.0 / b
    for e in fs.factors:
        mean = ad.mul(ad.reduce_sum(e, axis=0, keepdims=True), inv_b)
        centered = ad.sub(e, mean)
        var = ad.mul(ad.reduce_sum(ad.mul(centered, centered), axis=0, keepdims=True), inv_b)
        out.append(ad.div(centered, ad.sqrt(ad.add(var, eps))))
    return FactorSet(factors=out, modality=fs.modality)


def factor_covariance(z_text: FactorSet, z_audio: FactorSet) -> Tensor:
    """K x K cross-covariance, entry (i, j) = mean over batch and dimension of
    z_text_i . z_audio_j."""
    if z_text.count != z_audio.count:
        raise DimensionError(f"factor counts differ: {z_text.count} vs {z_audio.count}")
    if z_text.factors[0].value.shape != z_audio.factors[0].value.shape:
        raise DimensionError(
            f"factor shapes differ: {z_text.factors[0].value.shape} vs "
            f"{z_audio.factors[0].value.shape}"
        )
    b, width = z_text.factors[0].value.shape
    flat_t = ad.concat([ad.reshape(f, (1, b * width)) for f in z_text.factors], axis=0)
    flat_a = ad.concat([ad.reshape(f, (1, b * width)) for f in z_audio.factors], axis=0)
    return ad.mul(ad.matmul(flat_t, ad.transpose(flat_a)), 1.0 / (b * width))


def decoupling_loss(c: Tensor) -> Tensor:
    """Sum of squared off-diagonal covariance entries."""
    c = ad.as_tensor(c)
    k = _square_side(c)
    off_mask = 1.0 - np.eye(k)
    off = ad.mul(c, off_mask)
    return ad.reduce_sum(ad.mul(off, off))


def alignment_loss(c: Tensor) -> Tensor:
    """Sum of squared deviations of the covariance diagonal from 1."""
    c = ad.as_tensor(c)
    k = _square_side(c)
    diag = ad.reduce_sum(ad.mul(c, np.eye(k)), axis=1)
    dev = ad.sub(1.0, diag)
    return ad.reduce_sum(ad.mul(dev, dev))


def _square_side(c: Tensor) -> int:
    if c.value.ndim != 2 or c.value.shape[0] != c.value.shape[1]:
        raise DimensionError(f"covariance must be square, got {c.value.shape}")
    return c.value.shape[0]


def match_probabilities(c: np.ndarray, guard: float = DIAG_GUARD) -> tuple[np.ndarray, np.ndarray]:
    """Column-normalized covariance read as match probabilities (diagnostic).

    Returns (P, defined) where column j of P is C[:, j] / sum_k C[k, j] when
    the column sum's magnitude exceeds `guard`, else zeros with defined[j]
    False. Never emits NaN.
    """
    c = np.asarray(c, dtype=np.float64)
    sums = c.sum(axis=0)
    defined = np.abs(sums) > guard
    p = np.zeros_like(c)
    for j in np.nonzero(defined)[0]:
        p[:, j] = c[:, j] / sums[j]
    return p, defined


def offdiag_energy(c: np.ndarray) -> float:
    """Sum of squared off-diagonal entries (plain numpy, for logs/reports)."""
    c = np.asarray(c, dtype=np.float64)
    return float((c**2).sum() - (np.diag(c) ** 2).sum())
