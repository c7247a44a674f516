"""Synthetic paired dataset with known latent-factor structure, plus binary
container I/O for datasets and externally produced embeddings.

Each concept owns a unit vector living in exactly one factor slot of the
latent space (slots assigned round-robin). A pair samples 1..K distinct
concepts; its text tokens render those concept vectors through a fixed
orthogonal text map and its audio tokens through a (normally distinct) audio
map, cycled to fill the requested token counts, plus isotropic gaussian
noise. All containers are little-endian with fixed headers so round-trips
are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import subsystem_rng
from .errors import ConfigError, CorruptedRecordError, DimensionError, FormatError, VersionError

DATASET_MAGIC = b"XMAL"
EMBEDDING_MAGIC = b"XEMB"
SCHEMA_VERSION = 1
LEVELS = 3


@dataclass(frozen=True)
class SynthConfig:
    pairs: int
    concept_count: int = 16
    factor_count: int = 8
    embed_dim: int = 32
    text_tokens: int = 6
    audio_tokens: int = 8
    noise_sigma: float = 0.1
    seed: int = 0
    shared_projection: bool = False

    def __post_init__(self):
        if self.pairs < 1:
            raise ConfigError(f"pairs must be >= 1, got {self.pairs}")
        if self.factor_count < 1 or self.embed_dim % self.factor_count != 0:
            raise ConfigError(
                f"embed dim {self.embed_dim} must be divisible by factor count {self.factor_count}"
            )
        if self.concept_count < self.factor_count:
            raise ConfigError(
                f"need at least one concept per factor slot: "
                f"{self.concept_count} < {self.factor_count}"
            )
        if self.text_tokens < 1:
            raise ConfigError(f"text_tokens must be >= 1, got {self.text_tokens}")
        if self.audio_tokens < 4:
            raise ConfigError(f"audio_tokens must be >= 4, got {self.audio_tokens}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not (0 <= self.seed < 2**64):
            raise ConfigError(f"seed must fit in u64, got {self.seed}")


@dataclass
class PairItem:
    pair_id: int
    concepts: tuple[int, ...]  # ground-truth concept labels, sorted
    audio: np.ndarray  # (M, D)
    text: np.ndarray  # (N, D)


@dataclass
class Dataset:
    config: SynthConfig
    items: list[PairItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


def concept_slot(concept: int, factor_count: int) -> int:
    return concept % factor_count


def _orthogonal(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def generate(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic pairs; identical configs give identical bytes."""
    rng = subsystem_rng(cfg.seed, "data")
    dim, k = cfg.embed_dim, cfg.factor_count
    width = dim // k

    concept_vecs = np.zeros((cfg.concept_count, dim))
    for c in range(cfg.concept_count):
        slot = concept_slot(c, k)
        v = rng.normal(size=width)
        concept_vecs[c, slot * width : (slot + 1) * width] = v / np.linalg.norm(v)

    text_map = _orthogonal(rng, dim)
    audio_map = _orthogonal(rng, dim)
    if cfg.shared_projection:
        audio_map = text_map

    items = []
    for pair_id in range(cfg.pairs):
        count = int(rng.integers(1, k + 1))
        concepts = tuple(sorted(rng.choice(cfg.concept_count, size=count, replace=False).tolist()))
        latent = concept_vecs[list(concepts)]  # (count, D)

        def render(projection, tokens):
            rows = latent[np.arange(tokens) % count] @ projection.T
            if cfg.noise_sigma > 0:
                rows = rows + cfg.noise_sigma * rng.normal(size=rows.shape)
            return rows

        text = render(text_map, cfg.text_tokens)
        audio = render(audio_map, cfg.audio_tokens)
        items.append(PairItem(pair_id=pair_id, concepts=concepts, audio=audio, text=text))
    return Dataset(config=cfg, items=items)


# -- container I/O ------------------------------------------------------------

_DATASET_HEADER = struct.Struct("<4sIIIIIIIQdI")  # magic, version, pairs, K, D, N, M,
# concepts, seed, sigma, shared flag


class _Reader:
    def __init__(self, f, path: str):
        self.f = f
        self.path = path

    def exact(self, n: int) -> bytes:
        chunk = self.f.read(n)
        if len(chunk) != n:
            raise CorruptedRecordError(f"{self.path}: needed {n} bytes, got {len(chunk)}")
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.exact(4))[0]

    def array(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.exact(8 * n), dtype="<f8").reshape(shape).copy()


def _check_magic(reader: _Reader, expected: bytes):
    magic = reader.exact(4)
    if magic != expected:
        raise FormatError(f"{reader.path}: bad magic {magic!r}, expected {expected!r}")


def save_dataset(ds: Dataset, path: str, manifest_extra: dict | None = None):
    cfg = ds.config
    with open(path, "wb") as f:
        f.write(
            _DATASET_HEADER.pack(
                DATASET_MAGIC,
                SCHEMA_VERSION,
                cfg.pairs,
                cfg.factor_count,
                cfg.embed_dim,
                cfg.text_tokens,
                cfg.audio_tokens,
                cfg.concept_count,
                cfg.seed,
                cfg.noise_sigma,
                int(cfg.shared_projection),
            )
        )
        for item in ds.items:
            f.write(struct.pack("<I", len(item.concepts)))
            f.write(struct.pack(f"<{len(item.concepts)}I", *item.concepts))
            f.write(np.ascontiguousarray(item.audio, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(item.text, dtype="<f8").tobytes())
    manifest = dataset_manifest(cfg)
    manifest.update(manifest_extra or {})
    write_manifest(path + ".manifest", manifest)


def dataset_manifest(cfg: SynthConfig) -> dict[str, object]:
    return {
        "magic": DATASET_MAGIC.decode(),
        "schema_version": SCHEMA_VERSION,
        "pairs": cfg.pairs,
        "K": cfg.factor_count,
        "D": cfg.embed_dim,
        "N": cfg.text_tokens,
        "M": cfg.audio_tokens,
        "concept_count": cfg.concept_count,
        "seed": cfg.seed,
        "sigma": cfg.noise_sigma,
        "shared_projection": int(cfg.shared_projection),
    }


def write_manifest(path: str, entries: dict[str, object]):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in entries.items():
            f.write(f"{key}={value}\n")


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        reader = _Reader(f, path)
        _check_magic(reader, DATASET_MAGIC)
        version = reader.u32()
        if version != SCHEMA_VERSION:
            raise VersionError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
        rest = reader.exact(_DATASET_HEADER.size - 8)
        pairs, k, dim, n, m, concepts, seed, sigma, shared = struct.unpack("<IIIIIIQdI", rest)
        cfg = SynthConfig(
            pairs=pairs,
            concept_count=concepts,
            factor_count=k,
            embed_dim=dim,
            text_tokens=n,
            audio_tokens=m,
            noise_sigma=sigma,
            seed=seed,
            shared_projection=bool(shared),
        )
        items = []
        for pair_id in range(pairs):
            count = reader.u32()
            if count < 1 or count > k:
                raise CorruptedRecordError(f"{path}: pair {pair_id} has {count} concept labels")
            labels = struct.unpack(f"<{count}I", reader.exact(4 * count))
            audio = reader.array((m, dim))
            text = reader.array((n, dim))
            items.append(PairItem(pair_id=pair_id, concepts=tuple(labels), audio=audio, text=text))
        if f.read(1):
            raise CorruptedRecordError(f"{path}: trailing bytes after last record")
    return Dataset(config=cfg, items=items)


# -- embedding containers ------------------------------------------------------


@dataclass
class EmbeddingItem:
    audio_levels: list[np.ndarray]  # 3 x (M_l, D)
    audio_global: np.ndarray  # (D,)
    text_levels: list[np.ndarray]  # 3 x (N_l, D)
    text_global: np.ndarray  # (D,)


@dataclass
class EmbeddingSet:
    dim: int
    audio_counts: tuple[int, ...]
    text_counts: tuple[int, ...]
    items: list[EmbeddingItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


def save_embeddings(es: EmbeddingSet, path: str):
    if len(es.audio_counts) != LEVELS or len(es.text_counts) != LEVELS:
        raise DimensionError(
            f"embedding sets carry {LEVELS} levels, got {len(es.audio_counts)} audio "
            f"and {len(es.text_counts)} text"
        )
    for item in es.items:
        for lvl, arr in enumerate(item.audio_levels):
            if arr.shape != (es.audio_counts[lvl], es.dim):
                raise DimensionError(
                    f"audio level {lvl} shape {arr.shape} != {(es.audio_counts[lvl], es.dim)}"
                )
        for lvl, arr in enumerate(item.text_levels):
            if arr.shape != (es.text_counts[lvl], es.dim):
                raise DimensionError(
                    f"text level {lvl} shape {arr.shape} != {(es.text_counts[lvl], es.dim)}"
                )
        if item.audio_global.shape != (es.dim,) or item.text_global.shape != (es.dim,):
            raise DimensionError("global vector width does not match header dim")
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<IIII", SCHEMA_VERSION, len(es.items), es.dim, LEVELS))
        f.write(struct.pack(f"<{LEVELS}I", *es.audio_counts))
        f.write(struct.pack(f"<{LEVELS}I", *es.text_counts))
        for item in es.items:
            for arr in item.audio_levels:
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(item.audio_global, dtype="<f8").tobytes())
            for arr in item.text_levels:
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(item.text_global, dtype="<f8").tobytes())


def load_embeddings(path: str) -> EmbeddingSet:
    with open(path, "rb") as f:
        reader = _Reader(f, path)
        _check_magic(reader, EMBEDDING_MAGIC)
        version = reader.u32()
        if version != SCHEMA_VERSION:
            raise VersionError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
        count, dim, levels = reader.u32(), reader.u32(), reader.u32()
        if levels != LEVELS:
            raise FormatError(f"{path}: {levels} levels declared, expected {LEVELS}")
        audio_counts = struct.unpack(f"<{LEVELS}I", reader.exact(4 * LEVELS))
        text_counts = struct.unpack(f"<{LEVELS}I", reader.exact(4 * LEVELS))
        es = EmbeddingSet(dim=dim, audio_counts=audio_counts, text_counts=text_counts)
        for _ in range(count):
            audio_levels = [reader.array((c, dim)) for c in audio_counts]
            audio_global = reader.array((dim,))
            text_levels = [reader.array((c, dim)) for c in text_counts]
            text_global = reader.array((dim,))
            es.items.append(
                EmbeddingItem(
                    audio_levels=audio_levels,
                    audio_global=audio_global,
                    text_levels=text_levels,
                    text_global=text_global,
                )
            )
        if f.read(1):
            raise CorruptedRecordError(f"{path}: trailing bytes after last item")
    return es


def shared_concepts(a: PairItem, b: PairItem) -> int:
    """Ground-truth overlap oracle used by separability checks."""
    return len(set(a.concepts) & set(b.concepts))
