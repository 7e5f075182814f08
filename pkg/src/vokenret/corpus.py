"""Paired text/image embedding datasets.

Three sources feed the pipeline: synthetic clustered generation with a
controllable modality gap, ingestion of precomputed embedding blobs, and
deterministic by-image splits. Base embeddings are frozen and L2-normalized
on load so squared-distance losses are scale-comparable across datasets.

Blob format: magic ``AVGE``, u32 version=1, u32 D, u64 row count, then
row-major little-endian f32 vectors. Pairs file: one line per caption,
``text_id<TAB>image_id<TAB>optional caption``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError

BLOB_MAGIC = b"AVGE"
BLOB_VERSION = 1


@dataclass
class EmbeddingRecord:
    """One caption paired with its image, both as frozen embedding vectors."""

    image_id: int
    text_id: int
    image_vec: np.ndarray
    text_vec: np.ndarray
    cluster_id: Optional[int] = None
    caption: Optional[str] = None


@dataclass
class DatasetBundle:
    records: list[EmbeddingRecord]
    captions_per_image: int
    D: int
    split_tag: str = "all"

    @property
    def num_images(self) -> int:
        return len({r.image_id for r in self.records})

    def image_ids(self) -> list[int]:
        return sorted({r.image_id for r in self.records})

    def image_matrix(self) -> np.ndarray:
        """(num_images, D) array of per-image vectors, row i for the i-th
        id in sorted order (dense bundles: row == image_id)."""
        seen: dict[int, np.ndarray] = {}
        for r in self.records:
            seen.setdefault(r.image_id, r.image_vec)
        return np.stack([seen[i] for i in sorted(seen)])

    def validate(self, dense_ids: bool = True) -> None:
        counts: dict[int, int] = {}
        for r in self.records:
            if r.image_vec.shape != (self.D,) or r.text_vec.shape != (self.D,):
                raise IntegrityError(
                    f"record {r.text_id}: vector length != D={self.D}"
                )
            if not (np.isfinite(r.image_vec).all() and np.isfinite(r.text_vec).all()):
                raise IntegrityError(f"record {r.text_id}: non-finite values")
            counts[r.image_id] = counts.get(r.image_id, 0) + 1
        bad = {i: c for i, c in counts.items() if c != self.captions_per_image}
        if bad:
            raise IntegrityError(
                f"images with caption count != {self.captions_per_image}: "
                f"{sorted(bad)[:5]}"
            )
        if dense_ids and counts:
            ids = sorted(counts)
            if ids != list(range(len(ids))):
                raise IntegrityError("image ids are not dense in [0, num_images)")


@dataclass
class SynthConfig:
    num_images: int = 512
    num_clusters: int = 16
    D: int = 64
    captions_per_image: int = 5
    image_noise_sigma: float = 0.5
    text_noise_sigma: float = 0.5
    modality_gap_strength: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_images < 1 or self.num_clusters < 1:
            raise ConfigError("num_images and num_clusters must be positive")
        if self.num_clusters > self.num_images:
            raise ConfigError("num_clusters cannot exceed num_images")
        if self.D < 2:
            raise ConfigError("embedding dimension D must be at least 2")
        if self.captions_per_image < 1:
            raise ConfigError("captions_per_image must be at least 1")
        if self.image_noise_sigma < 0 or self.text_noise_sigma < 0:
            raise ConfigError("noise sigmas must be non-negative")
        if self.modality_gap_strength < 0:
            raise ConfigError("modality_gap_strength must be non-negative")


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize rows; idempotent up to 1e-9."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise IntegrityError("cannot normalize a zero vector")
    return x / norms


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded random orthogonal matrix with a deterministic sign convention."""
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def generate_synthetic(config: SynthConfig) -> DatasetBundle:
    """Clustered paired embeddings with a tunable text/image geometry gap.

    Image vectors are noisy cluster centers; text vectors see the centers
    through G = (1-g)I + gR with R a fixed seeded orthogonal map, so g=0
    gives a shared geometry and g=1 a fully rotated one.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    centers = rng.standard_normal((config.num_clusters, config.D))
    rot = random_orthogonal(config.D, rng)
    g = config.modality_gap_strength
    gap = (1.0 - g) * np.eye(config.D) + g * rot

    cluster_of = np.arange(config.num_images) % config.num_clusters
    rng.shuffle(cluster_of)

    records: list[EmbeddingRecord] = []
    text_id = 0
    for image_id in range(config.num_images):
        c = int(cluster_of[image_id])
        center = centers[c]
        image_vec = center + config.image_noise_sigma * rng.standard_normal(config.D)
        image_vec = normalize_rows(image_vec[None, :])[0]
        text_center = gap @ center
        for _ in range(config.captions_per_image):
            text_vec = text_center + config.text_noise_sigma * rng.standard_normal(config.D)
            text_vec = normalize_rows(text_vec[None, :])[0]
            records.append(EmbeddingRecord(
                image_id=image_id,
                text_id=text_id,
                image_vec=image_vec.astype(np.float32),
                text_vec=text_vec.astype(np.float32),
                cluster_id=c,
            ))
            text_id += 1
    bundle = DatasetBundle(
        records=records,
        captions_per_image=config.captions_per_image,
        D=config.D,
        split_tag="all",
    )
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# blob / pairs persistence
# ---------------------------------------------------------------------------


def save_blob(path, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise FormatError("embedding blob expects a 2-D array")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<IIQ", BLOB_VERSION, rows.shape[1], rows.shape[0]))
        fh.write(rows.tobytes(order="C"))


def load_blob(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != BLOB_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {BLOB_MAGIC!r}")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    version, d, rows = struct.unpack_from("<IIQ", raw, 4)
    if version != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 20 + 4 * d * rows
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4", count=d * rows, offset=20).reshape(rows, d).copy()


def save_pairs(path, records: list[EmbeddingRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            caption = r.caption if r.caption is not None else ""
            fh.write(f"{r.text_id}\t{r.image_id}\t{caption}\n")


def _parse_pairs(path) -> list[tuple[int, int, Optional[str]]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t", 2)
        if len(parts) < 2:
            raise FormatError(f"{path}:{lineno}: expected 'text_id<TAB>image_id'")
        try:
            text_id, image_id = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer id")
        caption = parts[2] if len(parts) > 2 and parts[2] else None
        out.append((text_id, image_id, caption))
    return out


def load_embeddings(pairs_path, image_blob_path, text_blob_path) -> DatasetBundle:
    """Assemble a bundle from blob files plus the pairs mapping.

    Text blob row t is text t's embedding; image blob row i is image i's.
    All vectors come back L2-normalized.
    """
    images = load_blob(image_blob_path)
    texts = load_blob(text_blob_path)
    if images.shape[1] != texts.shape[1]:
        raise FormatError(
            f"dimension mismatch: images D={images.shape[1]}, texts D={texts.shape[1]}"
        )
    pairs = _parse_pairs(pairs_path)
    if len(pairs) != texts.shape[0]:
        raise IntegrityError(
            f"pairs file has {len(pairs)} rows but text blob has {texts.shape[0]}"
        )
    images = normalize_rows(images.astype(np.float64)).astype(np.float32)
    texts = normalize_rows(texts.astype(np.float64)).astype(np.float32)

    counts: dict[int, int] = {}
    records = []
    for text_id, image_id, caption in pairs:
        if not 0 <= text_id < texts.shape[0]:
            raise IntegrityError(f"text id {text_id} outside blob of {texts.shape[0]} rows")
        if not 0 <= image_id < images.shape[0]:
            raise IntegrityError(f"image id {image_id} outside blob of {images.shape[0]} rows")
        counts[image_id] = counts.get(image_id, 0) + 1
        records.append(EmbeddingRecord(
            image_id=image_id,
            text_id=text_id,
            image_vec=images[image_id],
            text_vec=texts[text_id],
            caption=caption,
        ))
    if len(counts) != images.shape[0]:
        raise IntegrityError(
            f"image blob has {images.shape[0]} rows but pairs reference {len(counts)} images"
        )
    per_image = set(counts.values())
    if len(per_image) != 1:
        raise IntegrityError(f"caption counts per image differ: {sorted(per_image)}")
    bundle = DatasetBundle(
        records=records,
        captions_per_image=per_image.pop(),
        D=images.shape[1],
        split_tag="all",
    )
    bundle.validate()
    return bundle


def save_bundle(directory, bundle: DatasetBundle) -> None:
    """Persist a bundle as the blob/pairs trio (plus cluster ids if present)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_image: dict[int, np.ndarray] = {}
    for r in bundle.records:
        by_image.setdefault(r.image_id, r.image_vec)
    image_rows = np.stack([by_image[i] for i in sorted(by_image)])
    text_rows = np.stack([r.text_vec for r in sorted(bundle.records, key=lambda r: r.text_id)])
    save_blob(directory / "images.avge", image_rows)
    save_blob(directory / "texts.avge", text_rows)
    save_pairs(directory / "pairs.tsv", sorted(bundle.records, key=lambda r: r.text_id))
    clusters = {r.image_id: r.cluster_id for r in bundle.records}
    if all(v is not None for v in clusters.values()):
        with open(directory / "clusters.tsv", "w", encoding="utf-8") as fh:
            for i in sorted(clusters):
                fh.write(f"{i}\t{clusters[i]}\n")


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    bundle = load_embeddings(
        directory / "pairs.tsv",
        directory / "images.avge",
        directory / "texts.avge",
    )
    cluster_path = directory / "clusters.tsv"
    if cluster_path.exists():
        clusters = {}
        for line in cluster_path.read_text().splitlines():
            i, c = line.split("\t")
            clusters[int(i)] = int(c)
        for r in bundle.records:
            r.cluster_id = clusters.get(r.image_id)
    return bundle


def split(bundle: DatasetBundle, train_frac: float, val_frac: float,
          seed: int) -> tuple[DatasetBundle, DatasetBundle, DatasetBundle]:
    """Deterministic disjoint by-image split; captions follow their image.

    Sub-bundles keep the parent's image ids so downstream artifacts can
    reference the corpus globally.
    """
    if not (0 < train_frac < 1 and 0 < val_frac < 1 and train_frac + val_frac < 1):
        raise ConfigError("fractions must lie in (0,1) and sum below 1")
    ids = np.array(bundle.image_ids())
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n = len(ids)
    n_train = int(n * train_frac)
    n_val = int(n * val_frac)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(
            f"split of {n} images into {train_frac}/{val_frac} leaves an empty part"
        )
    groups = {
        "train": set(ids[:n_train].tolist()),
        "val": set(ids[n_train:n_train + n_val].tolist()),
        "test": set(ids[n_train + n_val:].tolist()),
    }
    out = []
    for tag in ("train", "val", "test"):
        members = [r for r in bundle.records if r.image_id in groups[tag]]
        sub = DatasetBundle(
            records=members,
            captions_per_image=bundle.captions_per_image,
            D=bundle.D,
            split_tag=tag,
        )
        sub.validate(dense_ids=False)
        out.append(sub)
    return tuple(out)
