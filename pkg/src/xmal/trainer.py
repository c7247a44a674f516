"""Deterministic mini-batch training over the full model, with Adam/SGD,
stateless per-epoch shuffling, divergence detection, and checkpoint files
that round-trip byte-exactly."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad, factors, objective as obj
from .autodiff import Tensor
from .config import subsystem_rng
from .errors import (
    ConfigError,
    CorruptedRecordError,
    DimensionError,
    FormatError,
    TrainingDiverged,
    VersionError,
)
from .model import Model
from .objective import ObjectiveConfig

CHECKPOINT_MAGIC = b"XCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    clip_norm: float | None = None
    checkpoint_interval: int = 0  # steps between mid-run snapshots; 0 = end only

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if (self.objective.alpha > 0 or self.objective.beta > 0) and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when the factor losses are weighted")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass
class StepRecord:
    step: int
    loss_s: float
    loss_d: float
    loss_a: float
    loss: float


@dataclass
class EpochDiagnostics:
    epoch: int  # 0 = before training
    offdiag_energy: float
    min_diag: float


@dataclass
class TrainResult:
    log: list[StepRecord]
    diagnostics: list[EpochDiagnostics]
    optimizer: "Optimizer"
    steps_per_epoch: int


class Optimizer:
    def step(self, params: list[Tensor], grads: dict[str, np.ndarray]):
        raise NotImplementedError

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, tensors: dict[str, np.ndarray]):
        pass


class Sgd(Optimizer):
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for p in params:
            p.value = p.value - self.lr * grads[p.name]


class Adam(Optimizer):
    """Bias-corrected first/second moment updates."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in params:
            g = grads[p.name]
            m = self.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            v = self.v[p.name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self):
        out = {"opt.t": np.array(float(self.t))}
        for name in sorted(self.m):
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors):
        self.t = int(np.asarray(tensors["opt.t"]).reshape(-1)[0])
        self.m = {k[len("opt.m.") :]: v for k, v in tensors.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v.") :]: v for k, v in tensors.items() if k.startswith("opt.v.")}


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "sgd":
        return Sgd(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.opt_eps)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Stateless shuffle: resuming mid-run replays the identical order."""
    return subsystem_rng(seed, f"shuffle.{epoch}").permutation(n)


def _clip_grads(grads: dict[str, np.ndarray], limit: float):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > limit:
        scale = limit / total
        for name in grads:
            grads[name] = grads[name] * scale


def _batch_covariance(model: Model, items) -> np.ndarray:
    encoded = model.encode_pairs(items)
    text_fs, audio_fs = model.batch_factors(encoded)
    c = factors.factor_covariance(
        factors.batch_standardize(text_fs), factors.batch_standardize(audio_fs)
    )
    return c.value


def train(
    model: Model,
    dataset,
    cfg: TrainConfig,
    start_step: int = 0,
    optimizer: Optimizer | None = None,
    diagnostics_items=None,
    on_step=None,
) -> TrainResult:
    """Run the loop from `start_step` (exclusive); deterministic in (cfg, seed).

    With `diagnostics_items`, the cross-modal factor covariance on that fixed
    batch is summarized before training and after every epoch. `on_step(step,
    optimizer)` fires every `cfg.checkpoint_interval` steps when set.
    """
    n = len(dataset.items)
    if n < cfg.batch_size:
        raise ConfigError(f"dataset has {n} pairs, need at least batch_size={cfg.batch_size}")
    steps_per_epoch = n // cfg.batch_size
    params = model.parameters()
    optimizer = optimizer or make_optimizer(cfg)
    ocfg = cfg.objective
    want_factor_losses = (ocfg.alpha > 0 or ocfg.beta > 0) and cfg.batch_size >= 2

    log: list[StepRecord] = []
    diagnostics: list[EpochDiagnostics] = []

    def record_diagnostics(epoch: int):
        if diagnostics_items is None:
            return
        c = _batch_covariance(model, diagnostics_items)
        diagnostics.append(
            EpochDiagnostics(
                epoch=epoch,
                offdiag_energy=factors.offdiag_energy(c),
                min_diag=float(np.diag(c).min()),
            )
        )

    if start_step == 0:
        record_diagnostics(0)

    for epoch in range(cfg.epochs):
        if (epoch + 1) * steps_per_epoch <= start_step:
            continue  # fully covered by the checkpoint being resumed
        perm = epoch_permutation(cfg.seed, epoch, n)
        for s in range(steps_per_epoch):
            step = epoch * steps_per_epoch + s + 1
            if step <= start_step:
                continue
            batch = [dataset.items[i] for i in perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]]
            encoded = model.encode_pairs(batch)
            s_matrix = model.similarity_matrix(encoded, ocfg.similarity_mode)
            loss_s = obj.nt_xent(s_matrix, ocfg.tau)
            if want_factor_losses:
                text_fs, audio_fs = model.batch_factors(encoded)
                cov = factors.factor_covariance(
                    factors.batch_standardize(text_fs), factors.batch_standardize(audio_fs)
                )
                loss_d = factors.decoupling_loss(cov)
                loss_a = factors.alignment_loss(cov)
            else:
                loss_d = ad.Tensor(0.0)
                loss_a = ad.Tensor(0.0)
            loss = obj.total_loss(loss_s, loss_d, loss_a, ocfg)
            values = (float(loss_s.value), float(loss_d.value), float(loss_a.value), float(loss.value))
            if not all(np.isfinite(values)):
                raise TrainingDiverged(step)
            grads = ad.gradients(loss, params)
            if cfg.clip_norm is not None:
                _clip_grads(grads, cfg.clip_norm)
            optimizer.step(params, grads)
            log.append(StepRecord(step, *values))
            if on_step is not None and cfg.checkpoint_interval > 0 and step % cfg.checkpoint_interval == 0:
                on_step(step, optimizer)
        record_diagnostics(epoch + 1)

    return TrainResult(
        log=log, diagnostics=diagnostics, optimizer=optimizer, steps_per_epoch=steps_per_epoch
    )


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    tensors: dict[str, np.ndarray]
    config_text: str


def save_checkpoint(path: str, model: Model, optimizer: Optimizer, step: int, config_text: str):
    tensors = {name: model.params[name].value for name in sorted(model.params)}
    tensors.update(optimizer.state_tensors())
    blob = config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQI", CHECKPOINT_VERSION, step, len(tensors)))
        for name in sorted(tensors):
            encoded = name.encode("utf-8")
            arr = np.asarray(tensors[name], dtype="<f8")  # keeps 0-d shape intact
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")

        def exact(n):
            chunk = f.read(n)
            if len(chunk) != n:
                raise CorruptedRecordError(f"{path}: needed {n} bytes, got {len(chunk)}")
            return chunk

        version, step, count = struct.unpack("<IQI", exact(16))
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", exact(4))
            name = exact(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", exact(4))
            shape = struct.unpack(f"<{ndim}I", exact(4 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(exact(8 * size), dtype="<f8").reshape(shape).copy()
        (blob_len,) = struct.unpack("<I", exact(4))
        config_text = exact(blob_len).decode("utf-8")
        if f.read(1):
            raise CorruptedRecordError(f"{path}: trailing bytes")
    return Checkpoint(step=step, tensors=tensors, config_text=config_text)


def restore_params(model: Model, tensors: dict[str, np.ndarray]):
    """Load parameter values into an existing model, checking names and shapes."""
    for name, param in model.params.items():
        if name not in tensors:
            raise DimensionError(f"checkpoint is missing parameter {name!r}")
        arr = tensors[name]
        if arr.shape != param.value.shape:
            raise DimensionError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, "
                f"model expects {param.value.shape}"
            )
        param.value = arr.copy()
