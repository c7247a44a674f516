"""Confidence-weighted factor-pair similarity.

A two-layer network with a ReLU scores each (text-factor, audio-factor) pair
from their concatenation; the score is squashed into (0, 1) and weights the
pair's cosine. The per-item score is the sum of weighted cosines over the K
pairs; weights are independent per pair (no normalization across pairs).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, Tensor
from .errors import ConfigError, DimensionError

SQUASHES = ("logistic", "none")


def init_confidence_params(
    factor_dim: int, hidden: int, rng: np.random.Generator
) -> dict[str, Tensor]:
    fan1 = 2 * factor_dim
    params = {
        "conf.w1": ad.parameter(
            rng.uniform(-1 / np.sqrt(fan1), 1 / np.sqrt(fan1), size=(hidden, fan1)), "conf.w1"
        ),
        "conf.b1": ad.parameter(np.zeros(hidden), "conf.b1"),
        "conf.w2": ad.parameter(
            rng.uniform(-1 / np.sqrt(hidden), 1 / np.sqrt(hidden), size=(1, hidden)), "conf.w2"
        ),
        "conf.b2": ad.parameter(np.zeros(1), "conf.b2"),
    }
    return params


def _check_squash(squash: str):
    if squash not in SQUASHES:
        raise ConfigError(f"squash must be one of {SQUASHES}, got {squash!r}")


def confidence_batch(
    text_factors: Tensor, audio_factors: Tensor, params: dict[str, Tensor], squash: str = "logistic"
) -> Tensor:
    """Scores for a stack of pairs: (P, d) x (P, d) -> (P,)."""
    _check_squash(squash)
    t, a = ad.as_tensor(text_factors), ad.as_tensor(audio_factors)
    if t.value.shape != a.value.shape:
        raise DimensionError(f"factor shapes differ: {t.value.shape} vs {a.value.shape}")
    x = ad.concat([t, a], axis=1)
    if x.value.shape[1] != params["conf.w1"].value.shape[1]:
        raise DimensionError(
            f"confidence input width {x.value.shape[1]} does not match "
            f"first layer {params['conf.w1'].value.shape}"
        )
    h = ad.hinge(ad.add(ad.matmul(x, ad.transpose(params["conf.w1"])), params["conf.b1"]))
    y = ad.add(ad.matmul(h, ad.transpose(params["conf.w2"])), params["conf.b2"])
    y = ad.reshape(y, (t.value.shape[0],))
    return ad.sigmoid(y) if squash == "logistic" else y


def confidence(
    e_text: Tensor, e_audio: Tensor, params: dict[str, Tensor], squash: str = "logistic"
) -> Tensor:
    """Score for one pair of factor vectors, in (0, 1) under the logistic squash."""
    t, a = ad.as_tensor(e_text), ad.as_tensor(e_audio)
    if t.value.ndim != 1 or t.value.shape != a.value.shape:
        raise DimensionError(f"expected equal-length vectors, got {t.value.shape} and {a.value.shape}")
    d = t.value.shape[0]
    out = confidence_batch(ad.reshape(t, (1, d)), ad.reshape(a, (1, d)), params, squash)
    return ad.reshape(out, ())


def factor_pair_similarity(
    text_factors: list[Tensor],
    audio_factors: list[Tensor],
    params: dict[str, Tensor],
    squash: str = "logistic",
    eps: float = EPS,
) -> Tensor:
    """One item pair: sum over K of confidence-weighted factor cosines."""
    if len(text_factors) != len(audio_factors):
        raise DimensionError(
            f"factor counts differ: {len(text_factors)} vs {len(audio_factors)}"
        )
    total = None
    for e_t, e_a in zip(text_factors, audio_factors):
        g = confidence(e_t, e_a, params, squash)
        cos = ad.reduce_sum(ad.mul(ad.l2_normalize(e_t, eps), ad.l2_normalize(e_a, eps)))
        term = ad.mul(g, cos)
        total = term if total is None else ad.add(total, term)
    return total


def factor_pair_terms(
    text_factors: list[Tensor],
    audio_factors: list[Tensor],
    params: dict[str, Tensor],
    squash: str = "logistic",
    eps: float = EPS,
) -> list[tuple[float, float]]:
    """Per-factor (confidence, cosine) pairs for score breakdowns."""
    terms = []
    for e_t, e_a in zip(text_factors, audio_factors):
        g = confidence(e_t, e_a, params, squash)
        cos = ad.reduce_sum(ad.mul(ad.l2_normalize(e_t, eps), ad.l2_normalize(e_a, eps)))
        terms.append((float(g.value), float(cos.value)))
    return terms


def factor_pair_similarity_matrix(
    text_factors: list[Tensor],
    audio_factors: list[Tensor],
    params: dict[str, Tensor],
    squash: str = "logistic",
    eps: float = EPS,
) -> Tensor:
    """All-pairs confidence-weighted factor similarity.

    Factor lists hold (B, d) tensors; output entry (i, j) scores audio item i
    against text item j. The B*B confidence inputs per factor run through the
    network as one stack.
    """
    if len(text_factors) != len(audio_factors):
        raise DimensionError(
            f"factor counts differ: {len(text_factors)} vs {len(audio_factors)}"
        )
    b = text_factors[0].value.shape[0]
    repeat = np.repeat(np.eye(b), b, axis=0)  # audio row i -> rows i*B..i*B+B-1
    tile = np.tile(np.eye(b), (b, 1))  # text row j -> rows j, B+j, ...
    total = None
    for e_t, e_a in zip(text_factors, audio_factors):
        t_all = ad.matmul(ad.Tensor(tile), e_t)
        a_all = ad.matmul(ad.Tensor(repeat), e_a)
        g = ad.reshape(confidence_batch(t_all, a_all, params, squash), (b, b))
        cos = ad.matmul(ad.normalize_rows(e_a, eps), ad.transpose(ad.normalize_rows(e_t, eps)))
        term = ad.mul(g, cos)
        total = term if total is None else ad.add(total, term)
    return total
