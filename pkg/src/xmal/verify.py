"""Self-verification: finite-difference checks for every primitive and for
the full losses, oracle-equivalence checks against independent step-by-step
recomputations, and the core numeric invariants. Backs the `grad-check`
command and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention, autodiff as ad, factors, objective as obj
from .attention import AttentionConfig
from .data import PairItem
from .model import Model, ModelConfig


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def _spread(rng, *shape):
    """Values bounded away from zero so relative FD errors stay conditioned."""
    return np.sign(rng.normal(size=shape)) * (0.5 + np.abs(rng.normal(size=shape)))


def _primitive_cases() -> list[tuple[str, Callable]]:
    """(name, builder) pairs; builder(rng) -> (fn, params) for an FD check.

    Each case reads the op's output through a fixed probe so every parameter
    entry carries a well-conditioned gradient.
    """

    def unary(op, positive: bool = False):
        def build(rng):
            base = np.abs(_spread(rng, 5, 4)) if positive else _spread(rng, 5, 4)
            x = ad.parameter(base, "x")
            probe = _spread(rng, *op(ad.Tensor(base)).value.shape)
            return (lambda: ad.reduce_sum(ad.mul(op(x), probe))), [x]

        return build

    def binary(op):
        def build(rng):
            x = ad.parameter(_spread(rng, 4, 5), "x")
            y = ad.parameter(_spread(rng, 4, 5), "y")
            probe = _spread(rng, 4, 5)
            return (lambda: ad.reduce_sum(ad.mul(op(x, y), probe))), [x, y]

        return build

    def build_matmul(rng):
        x = ad.parameter(_spread(rng, 3, 5), "x")
        y = ad.parameter(_spread(rng, 5, 2), "y")
        probe = _spread(rng, 3, 2)
        return (lambda: ad.reduce_sum(ad.mul(ad.matmul(x, y), probe))), [x, y]

    def build_broadcast(rng):
        x = ad.parameter(_spread(rng, 4, 5), "x")
        b = ad.parameter(_spread(rng, 5), "b")
        probe = _spread(rng, 4, 5)
        return (lambda: ad.reduce_sum(ad.mul(ad.add(x, b), probe))), [x, b]

    def build_concat(rng):
        x = ad.parameter(_spread(rng, 3, 2), "x")
        y = ad.parameter(_spread(rng, 3, 4), "y")
        probe = _spread(rng, 3, 6)
        return (lambda: ad.reduce_sum(ad.mul(ad.concat([x, y], axis=1), probe))), [x, y]

    def build_permute(rng):
        x = ad.parameter(_spread(rng, 2, 3, 4), "x")
        probe = _spread(rng, 4, 2, 3)
        return (lambda: ad.reduce_sum(ad.mul(ad.permute(x, (2, 0, 1)), probe))), [x]

    def build_reshape(rng):
        x = ad.parameter(_spread(rng, 6, 4), "x")
        probe = _spread(rng, 3, 8)
        return (lambda: ad.reduce_sum(ad.mul(ad.reshape(x, (3, 8)), probe))), [x]

    def build_sum_axis(rng):
        x = ad.parameter(_spread(rng, 4, 5), "x")
        probe = _spread(rng, 1, 5)
        return (
            lambda: ad.reduce_sum(ad.mul(ad.reduce_sum(x, axis=0, keepdims=True), probe))
        ), [x]

    def build_einsum(rng):
        a = ad.parameter(_spread(rng, 2, 3, 4), "a")
        b = ad.parameter(_spread(rng, 5, 3, 4), "b")
        probe = _spread(rng, 2, 5, 3, 3)
        return (
            lambda: ad.reduce_sum(ad.mul(ad.einsum("imd,jnd->ijmn", a, b), probe))
        ), [a, b]

    def build_einsum_vec(rng):
        a = ad.parameter(_spread(rng, 3, 4, 5), "a")
        w = ad.parameter(_spread(rng, 5), "w")
        probe = _spread(rng, 3, 4)
        return (lambda: ad.reduce_sum(ad.mul(ad.einsum("bnd,d->bn", a, w), probe))), [a, w]

    def build_softmax(rng):
        # bounded logits keep all probabilities, hence all gradient entries,
        # well away from underflow
        x = ad.parameter(rng.uniform(-1.0, 1.0, size=(4, 5)), "x")
        probe = _spread(rng, 4, 5)
        return (lambda: ad.reduce_sum(ad.mul(ad.row_softmax(x, 1.3), probe))), [x]

    def build_l2norm(rng):
        x = ad.parameter(_spread(rng, 6), "x")
        probe = _spread(rng, 6)
        return (lambda: ad.reduce_sum(ad.mul(ad.l2_normalize(x), probe))), [x]

    return [
        ("add", binary(ad.add)),
        ("sub", binary(ad.sub)),
        ("neg", unary(ad.neg)),
        ("mul", binary(ad.mul)),
        ("div", binary(ad.div)),
        ("matmul", build_matmul),
        ("broadcast_add", build_broadcast),
        ("transpose", unary(ad.transpose)),
        ("permute", build_permute),
        ("reshape", build_reshape),
        ("concat", build_concat),
        ("exp", unary(ad.exp)),
        ("log", unary(ad.log, positive=True)),
        ("sqrt", unary(ad.sqrt, positive=True)),
        ("power", unary(lambda t: ad.power(t, 3))),
        ("hinge", unary(ad.hinge)),
        ("sigmoid", unary(ad.sigmoid)),
        ("sum_axis", build_sum_axis),
        ("einsum", build_einsum),
        ("einsum_vec", build_einsum_vec),
        ("row_softmax", build_softmax),
        ("l2_normalize", build_l2norm),
    ]


def primitive_checks(seeds: int = 10, h: float = 1e-5, tol: float = 1e-6) -> list[CheckResult]:
    """Randomized gradient check per registered primitive."""
    results = []
    for name, build in _primitive_cases():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            fn, params = build(rng)
            worst = max(worst, ad.finite_difference_check(fn, params, h=h))
        results.append(CheckResult(name=name, worst=worst, tol=tol))
    return results


# -- full-loss gradient checks -------------------------------------------------


def _toy_setup(seed: int, batch: int = 4, dim: int = 16, k: int = 4, m: int = 8, n: int = 5):
    rng = np.random.default_rng(2000 + seed)
    model = Model.build(
        ModelConfig(embed_dim=dim, factor_count=k, attention=AttentionConfig()), seed=seed
    )
    items = [
        PairItem(
            pair_id=i,
            concepts=(i,),
            audio=rng.normal(size=(m, dim)),
            text=rng.normal(size=(n, dim)),
        )
        for i in range(batch)
    ]
    return model, items


def _loss_builders(model: Model, items, tau: float, alpha: float, beta: float, mode: str):
    def loss_s():
        s = model.similarity_matrix(model.encode_pairs(items), mode)
        return obj.nt_xent(s, tau)

    def covariance():
        text_fs, audio_fs = model.batch_factors(model.encode_pairs(items))
        return factors.factor_covariance(
            factors.batch_standardize(text_fs), factors.batch_standardize(audio_fs)
        )

    def loss_d():
        return factors.decoupling_loss(covariance())

    def loss_a():
        return factors.alignment_loss(covariance())

    def loss_total():
        return obj.total_loss(
            loss_s(), loss_d(), loss_a(),
            obj.ObjectiveConfig(tau=tau, alpha=alpha, beta=beta, similarity_mode=mode),
        )

    return {"loss_s": loss_s, "loss_d": loss_d, "loss_a": loss_a, "loss_total": loss_total}


def loss_gradient_checks(
    seeds: int = 10,
    h: float = 1e-5,
    tol: float = 1e-4,
    entries_per_tensor: int = 2,
    mode: str = "THA+DCR",
) -> list[CheckResult]:
    """FD-check each loss component and the weighted total on random toy
    models. Every parameter tensor is probed at a seeded sample of entries."""
    worst = {name: 0.0 for name in ("loss_s", "loss_d", "loss_a", "loss_total")}
    for seed in range(seeds):
        model, items = _toy_setup(seed)
        builders = _loss_builders(model, items, tau=0.07, alpha=0.01, beta=0.005, mode=mode)
        for name, fn in builders.items():
            err = ad.finite_difference_check(
                fn, model.parameters(), h=h, max_entries=entries_per_tensor, seed=seed
            )
            worst[name] = max(worst[name], err)
    return [CheckResult(name=k, worst=v, tol=tol) for k, v in worst.items()]


# -- oracle equivalences ---------------------------------------------------------


def _attend_oracle(queries: np.ndarray, contexts: np.ndarray, temperature: float) -> np.ndarray:
    """Step-by-step recomputation: cosine -> hinge-column-normalize ->
    softmax -> weighted context sum."""
    m, n = queries.shape[0], contexts.shape[0]
    sims = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            qa, cb = queries[i], contexts[j]
            sims[i, j] = qa @ cb / max(np.linalg.norm(qa) * np.linalg.norm(cb), 1e-24)
    clipped = np.maximum(sims, 0.0)
    sbar = np.zeros_like(clipped)
    for j in range(n):
        norm = math.sqrt((clipped[:, j] ** 2).sum())
        if norm > 0:
            sbar[:, j] = clipped[:, j] / norm
    fused = np.zeros_like(queries)
    for i in range(m):
        logits = temperature * sbar[i]
        weights = np.exp(logits - logits.max())
        weights /= weights.sum()
        fused[i] = weights @ contexts
    return fused


def oracle_checks() -> list[CheckResult]:
    rng = np.random.default_rng(7)
    results = []

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    loops = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                loops[i, j] += a[i, k] * b[k, j]
    results.append(
        CheckResult(
            "matmul_vs_triple_loop",
            float(np.abs(ad.matmul(ad.Tensor(a), ad.Tensor(b)).value - loops).max()),
            1e-12,
        )
    )

    q = rng.normal(size=(2, 4))
    c = rng.normal(size=(3, 4))
    cfg = AttentionConfig(temperature=9.0, direction="text_enhanced")
    fused = attention.attend(ad.Tensor(q), ad.Tensor(c), cfg).value
    results.append(
        CheckResult(
            "attend_vs_composed_oracle",
            float(np.abs(fused - _attend_oracle(q, c, 9.0)).max()),
            1e-10,
        )
    )

    s = rng.normal(size=(4, 3))
    hn = attention.hinge_normalize(ad.Tensor(s)).value
    clipped = np.maximum(s, 0.0)
    direct = np.zeros_like(clipped)
    for j in range(3):
        norm = math.sqrt((clipped[:, j] ** 2).sum())
        if norm > 0:
            direct[:, j] = clipped[:, j] / norm
    results.append(
        CheckResult("hinge_normalize_vs_direct", float(np.abs(hn - direct).max()), 1e-10)
    )

    identity_loss = float(obj.nt_xent(ad.Tensor(np.eye(2)), 1.0).value)
    expected = 2.0 * (math.log(1.0 + math.e) - 1.0)
    results.append(CheckResult("nt_xent_identity_b2", abs(identity_loss - expected), 1e-10))

    for b_size in (2, 3, 4):
        s = rng.normal(size=(b_size, b_size))
        tau = 0.31
        ours = float(obj.nt_xent(ad.Tensor(s), tau).value)
        direct = 0.0
        for i in range(b_size):
            direct -= math.log(
                math.exp(s[i, i] / tau) / sum(math.exp(s[i, j] / tau) for j in range(b_size))
            )
            direct -= math.log(
                math.exp(s[i, i] / tau) / sum(math.exp(s[j, i] / tau) for j in range(b_size))
            )
        direct /= b_size
        results.append(CheckResult(f"nt_xent_direct_b{b_size}", abs(ours - direct), 1e-10))

    b_size, k, width = 5, 3, 2
    zt = rng.normal(size=(k, b_size, width))
    za = rng.normal(size=(k, b_size, width))
    from .factors import FactorSet

    cov = factors.factor_covariance(
        FactorSet([ad.Tensor(zt[i]) for i in range(k)], "text"),
        FactorSet([ad.Tensor(za[i]) for i in range(k)], "audio"),
    ).value
    direct = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            acc = 0.0
            for bb in range(b_size):
                acc += zt[i, bb] @ za[j, bb]
            direct[i, j] = acc / (b_size * width)
    results.append(
        CheckResult("factor_covariance_vs_direct_sum", float(np.abs(cov - direct).max()), 1e-12)
    )
    return results


def invariant_checks(instances: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(11)
    results = []

    worst = 0.0
    for _ in range(instances):
        scale = float(rng.uniform(0.1, 4.0))
        x = rng.normal(size=(3, 5)) * rng.choice([1.0, 1e3])
        sums = ad.row_softmax(ad.Tensor(x), scale).value.sum(axis=-1)
        worst = max(worst, float(np.abs(sums - 1.0).max()))
    results.append(CheckResult("softmax_rows_sum_to_one", worst, 1e-12))

    worst = 0.0
    for _ in range(instances):
        x = rng.normal(size=(4, 4))
        once = ad.hinge(ad.Tensor(x)).value
        twice = ad.hinge(ad.hinge(ad.Tensor(x))).value
        worst = max(worst, float(np.abs(once - twice).max()))
    results.append(CheckResult("hinge_idempotent", worst, 1e-300))

    worst = 0.0
    for _ in range(instances):
        s = rng.normal(size=(5, 4))
        hn = attention.hinge_normalize(ad.Tensor(s)).value
        for j in range(4):
            if (s[:, j] > 0).any():
                worst = max(worst, abs(float((hn[:, j] ** 2).sum()) - 1.0))
    results.append(CheckResult("hinge_normalize_unit_columns", worst, 1e-10))

    from .factors import FactorSet

    worst = 0.0
    for _ in range(instances):
        z = [ad.Tensor(rng.normal(size=(8, 2))) for _ in range(4)]
        zs = factors.batch_standardize(FactorSet(z, "text"))
        cov = factors.factor_covariance(zs, FactorSet(zs.factors, "audio")).value
        worst = max(worst, float(np.abs(np.diag(cov) - 1.0).max()))
    results.append(CheckResult("self_covariance_diag_one", worst, 1e-10))

    c_eye = ad.Tensor(np.eye(4))
    exact_zero = max(
        float(factors.decoupling_loss(c_eye).value), float(factors.alignment_loss(c_eye).value)
    )
    results.append(CheckResult("factor_losses_zero_at_identity", exact_zero, 1e-300))

    worst = 0.0
    for _ in range(instances):
        s = rng.normal(size=(4, 4))
        shift = float(rng.normal()) * 5.0
        base = float(obj.nt_xent(ad.Tensor(s), 0.2).value)
        shifted = float(obj.nt_xent(ad.Tensor(s + shift), 0.2).value)
        worst = max(worst, abs(base - shifted))
    results.append(CheckResult("nt_xent_shift_invariance", worst, 1e-10))

    return results


def run_all(
    seeds: int = 3, h: float = 1e-5, tol: float = 1e-6, full_loss: bool = True
) -> list[CheckResult]:
    results = primitive_checks(seeds=seeds, h=h, tol=tol)
    results.extend(oracle_checks())
    results.extend(invariant_checks())
    if full_loss:
        results.extend(loss_gradient_checks(seeds=1, h=h, tol=1e-4, entries_per_tensor=1))
    return results
