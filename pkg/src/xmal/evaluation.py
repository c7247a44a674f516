"""Retrieval evaluation: R@k in both directions over any similarity mode,
plus factor-covariance diagnostics.

Ranking is by descending score with a stable ascending-index tie-break, so
reports are deterministic. The synthetic protocol is strictly one caption
per audio clip; reports carry that note plus the config hash and seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import factors
from .autodiff import Tensor
from .confidence import confidence_batch
from .data import EmbeddingSet
from .errors import BatchTooSmallError, ContractError, DimensionError
from .model import EncodedBatch, Model

DIRECTIONS = ("text_to_audio", "audio_to_text")
REPORT_MAGIC = b"XRPT"
REPORT_VERSION = 1
PROTOCOL_NOTE = "one_caption_per_audio"


@dataclass
class RetrievalReport:
    mode: str
    direction: str
    r_at: dict[int, float]
    size: int
    seed: int
    config_hash: str
    protocol: str = PROTOCOL_NOTE


@dataclass
class DcrDiagnostics:
    covariance: np.ndarray  # (K, K)
    probabilities: np.ndarray  # (K, K), column-normalized where defined
    defined_columns: np.ndarray  # (K,) bool
    confidence_items: np.ndarray  # (B, K) matched-pair confidences
    confidence_mean: np.ndarray  # (K,)


def recall_at_k(s: np.ndarray, k: int, direction: str) -> float:
    """Percentage of queries whose true match (index = query index) ranks in
    the top k by descending score."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {s.shape}")
    n = s.shape[0]
    if not (1 <= k <= n):
        raise ContractError(f"k must be in [1, {n}], got {k}")
    if direction not in DIRECTIONS:
        raise ContractError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    hits = 0
    for q in range(n):
        scores = s[q, :] if direction == "audio_to_text" else s[:, q]
        order = np.argsort(-scores, kind="stable")  # ties keep ascending index
        rank = int(np.nonzero(order == q)[0][0])
        hits += rank < k
    return 100.0 * hits / n


def encoded_from_embeddings(es: EmbeddingSet) -> EncodedBatch:
    """Stack a loaded embedding file into batched constants."""
    audio_levels = [
        Tensor(np.stack([item.audio_levels[lvl] for item in es.items])) for lvl in range(3)
    ]
    text_levels = [
        Tensor(np.stack([item.text_levels[lvl] for item in es.items])) for lvl in range(3)
    ]
    return EncodedBatch(
        audio_levels=audio_levels,
        audio_global=Tensor(np.stack([item.audio_global for item in es.items])),
        text_levels=text_levels,
        text_global=Tensor(np.stack([item.text_global for item in es.items])),
    )


def evaluate(
    model: Model,
    dataset=None,
    embeddings: EmbeddingSet | None = None,
    modes: tuple[str, ...] = ("THA+DCR",),
    ks: tuple[int, ...] = (1, 5, 10),
    seed: int = 0,
    config_hash: str = "",
) -> list[RetrievalReport]:
    """One report per (mode, direction). Either a dataset (encoded by the
    model) or a pre-computed embedding set feeds the similarity matrices."""
    if embeddings is not None:
        model.check_embedding_dim(embeddings.dim)
        encoded = encoded_from_embeddings(embeddings)
    elif dataset is not None and len(dataset.items) > 0:
        encoded = model.encode_pairs(dataset.items)
    else:
        raise ContractError("evaluate needs a non-empty dataset or an embedding set")
    size = encoded.batch
    ks = tuple(k for k in ks)
    for k in ks:
        if not (1 <= k <= size):
            raise ContractError(f"k must be in [1, {size}], got {k}")
    reports = []
    for mode in modes:
        s = model.similarity_matrix(encoded, mode).value
        for direction in DIRECTIONS:
            r_at = {k: recall_at_k(s, k, direction) for k in ks}
            reports.append(
                RetrievalReport(
                    mode=mode,
                    direction=direction,
                    r_at=r_at,
                    size=size,
                    seed=seed,
                    config_hash=config_hash,
                )
            )
    return reports


def dcr_diagnostics(model: Model, items) -> DcrDiagnostics:
    """Covariance heat values, match probabilities, and matched-pair
    confidence statistics for a batch of >= 2 items."""
    if len(items) < 2:
        raise BatchTooSmallError(f"diagnostics need a batch of >= 2, got {len(items)}")
    encoded = model.encode_pairs(items)
    text_fs, audio_fs = model.batch_factors(encoded)
    cov = factors.factor_covariance(
        factors.batch_standardize(text_fs), factors.batch_standardize(audio_fs)
    ).value
    probs, defined = factors.match_probabilities(cov)
    cols = []
    for e_t, e_a in zip(text_fs.factors, audio_fs.factors):
        g = confidence_batch(e_t, e_a, model.params, model.cfg.squash)
        cols.append(g.value)
    confidence_items = np.stack(cols, axis=1)
    return DcrDiagnostics(
        covariance=cov,
        probabilities=probs,
        defined_columns=defined,
        confidence_items=confidence_items,
        confidence_mean=confidence_items.mean(axis=0),
    )


# -- report emission -----------------------------------------------------------


def write_report_text(path: str, reports: list[RetrievalReport]):
    with open(path, "w", encoding="utf-8") as f:
        if reports:
            f.write(f"config_hash={reports[0].config_hash}\n")
            f.write(f"seed={reports[0].seed}\n")
            f.write(f"eval_size={reports[0].size}\n")
            f.write(f"protocol={reports[0].protocol}\n")
        for r in reports:
            for k in sorted(r.r_at):
                f.write(f"{r.mode}.{r.direction}.r@{k}={r.r_at[k]!r}\n")


def write_report_binary(path: str, reports: list[RetrievalReport]):
    with open(path, "wb") as f:
        f.write(REPORT_MAGIC)
        f.write(struct.pack("<II", REPORT_VERSION, len(reports)))
        for r in reports:
            for text in (r.mode, r.direction, r.config_hash, r.protocol):
                blob = text.encode("utf-8")
                f.write(struct.pack("<I", len(blob)))
                f.write(blob)
            f.write(struct.pack("<QII", r.seed, r.size, len(r.r_at)))
            for k in sorted(r.r_at):
                f.write(struct.pack("<Id", k, r.r_at[k]))
