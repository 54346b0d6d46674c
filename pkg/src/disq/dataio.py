"""On-disk dataset contract: binary feature files, JSON manifests, synthetic data.

Feature files use a small fixed container ("DSQF"): a 16-byte header
(magic, format version, reserved word, row and column counts) followed by
the frame matrix as little-endian float32 in row-major order. Everything
the pipeline persists (per-layer hidden-state sequences, paralinguistic
frames, codebook centroids, checkpoint tensors) travels in this one format.

The synthetic generator plants controllable class structure: each layer
carries a tunable fraction of a seeded per-class mean direction, and the
paralinguistic stream carries class signal only in its prosody block. That
makes layer orderings and augmentation effects testable without any
external feature extractor.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DSQF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHII")  # magic, version, reserved, T, D
MAX_ELEMENTS = 1 << 31  # refuse absurd T*D before allocating

N_CLASSES = 8
OPENSMILE_DIM = 74
PROSODY_COLS = slice(0, 6)  # class signal block in synthetic opensmile frames

SPLITS = ("train", "dev", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class FeatureFileError(Exception):
    """Base class for feature-file format violations."""


class FeatureFormatError(FeatureFileError):
    """Bad magic, unsupported version, or trailing garbage."""


class TruncatedPayloadError(FeatureFileError):
    """File ends before the declared payload; message names expected vs actual bytes."""


class DimensionOverflowError(FeatureFileError):
    """Declared dimensions are zero or too large to be a real feature file."""


class NonFinitePayloadError(FeatureFileError):
    """Payload contains NaN or Inf."""


@dataclass
class FeatureSequence:
    """One stream's T x D frame matrix for a single utterance."""

    frames: np.ndarray
    stream_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {self.frames.shape}")
        t, d = self.frames.shape
        if t < 1 or d < 1:
            raise ValueError(f"frames must have T,D >= 1, got shape {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError(f"non-finite entries in stream {self.stream_id!r}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def write_feature_file(seq: FeatureSequence, path) -> None:
    """Serialize a FeatureSequence to the DSQF container (float32 payload)."""
    with np.errstate(over="ignore"):
        frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    if not np.isfinite(frames).all():
        raise ValueError("non-finite entries after float32 conversion; refusing to write")
    t, d = frames.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, 0, t, d)
    Path(path).write_bytes(header + frames.tobytes())


def read_feature_file(path, stream_id: str | None = None) -> FeatureSequence:
    """Parse a DSQF file, validating header, size, and payload finiteness."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(
            f"{path}: header truncated, expected at least {_HEADER.size} bytes, got {len(raw)}"
        )
    _, version, _, t, d = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported format version {version}")
    if t < 1 or d < 1 or t * d > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: dimensions {t} x {d} out of supported range")
    expected = _HEADER.size + 4 * t * d
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FeatureFormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d).copy()
    if not np.isfinite(frames).all():
        raise NonFinitePayloadError(f"{path}: payload contains NaN or Inf")
    return FeatureSequence(frames, stream_id=stream_id if stream_id is not None else path.stem)


@dataclass
class UtteranceRecord:
    """All streams of one utterance: layer features, optional opensmile, label, mask."""

    utt_id: str
    layers: dict[int, FeatureSequence]
    opensmile: FeatureSequence | None
    label: int
    frame_mask: np.ndarray

    def __post_init__(self):
        if not self.layers:
            raise ValueError(f"{self.utt_id}: no layer streams")
        shapes = {seq.frames.shape for seq in self.layers.values()}
        if len(shapes) != 1:
            raise ValueError(f"{self.utt_id}: inconsistent layer shapes {sorted(shapes)}")
        if self.opensmile is not None and self.opensmile.dim != OPENSMILE_DIM:
            raise ValueError(
                f"{self.utt_id}: opensmile dim {self.opensmile.dim} != {OPENSMILE_DIM}"
            )
        if not 0 <= self.label < N_CLASSES:
            raise ValueError(f"{self.utt_id}: label {self.label} out of range")
        self.frame_mask = np.asarray(self.frame_mask, dtype=bool)
        (t,) = {seq.n_frames for seq in self.layers.values()}
        if self.frame_mask.shape != (t,):
            raise ValueError(f"{self.utt_id}: mask length {self.frame_mask.shape} != T={t}")
        if not self.frame_mask.any():
            raise ValueError(f"{self.utt_id}: frame mask has no valid frames")

    @property
    def n_frames(self) -> int:
        return int(self.frame_mask.shape[0])


@dataclass
class ManifestRecord:
    utt_id: str
    layer_paths: list[str]
    label: int
    opensmile_path: str | None = None


@dataclass
class DatasetManifest:
    """Per-split listing of utterances; paths are relative to `root`."""

    records: list[ManifestRecord]
    layer_count: int
    feature_dim: int
    split: str
    root: Path

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)


def manifest_path(dataset_dir, split: str) -> Path:
    return Path(dataset_dir) / f"manifest_{split}.json"


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "version": 1,
        "split": manifest.split,
        "layer_count": manifest.layer_count,
        "feature_dim": manifest.feature_dim,
        "records": [
            {
                "utt_id": r.utt_id,
                "label": r.label,
                "layers": list(r.layer_paths),
                "opensmile": r.opensmile_path,
            }
            for r in manifest.records
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    """Load and validate a manifest: every listed path must resolve.

    A record may omit its opensmile stream (tokens-only experiments), but a
    missing layer file is always an error.
    """
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    root = path.parent
    records = []
    for rec in doc["records"]:
        layer_paths = list(rec["layers"])
        if len(layer_paths) != doc["layer_count"]:
            raise ValueError(
                f"{rec['utt_id']}: {len(layer_paths)} layer paths, expected {doc['layer_count']}"
            )
        for rel in layer_paths:
            if not (root / rel).is_file():
                raise FileNotFoundError(f"{rec['utt_id']}: missing layer file {root / rel}")
        osm = rec.get("opensmile")
        if osm is not None and not (root / osm).is_file():
            raise FileNotFoundError(f"{rec['utt_id']}: missing opensmile file {root / osm}")
        records.append(ManifestRecord(rec["utt_id"], layer_paths, int(rec["label"]), osm))
    manifest = DatasetManifest(
        records=records,
        layer_count=int(doc["layer_count"]),
        feature_dim=int(doc["feature_dim"]),
        split=doc["split"],
        root=root,
    )
    if manifest.split == "train":
        counts = np.bincount(manifest.labels(), minlength=N_CLASSES)
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0).tolist()
            raise ValueError(f"train split has no utterances for classes {missing}")
    return manifest


def load_utterance(manifest: DatasetManifest, record: ManifestRecord) -> UtteranceRecord:
    layers = {}
    for idx, rel in enumerate(record.layer_paths):
        seq = read_feature_file(manifest.root / rel, stream_id=f"layer:{idx}")
        if seq.dim != manifest.feature_dim:
            raise ValueError(f"{record.utt_id} layer {idx}: dim {seq.dim} != {manifest.feature_dim}")
        layers[idx] = seq
    osm = None
    if record.opensmile_path is not None:
        osm = read_feature_file(manifest.root / record.opensmile_path, stream_id="osm")
    t = layers[0].n_frames
    return UtteranceRecord(record.utt_id, layers, osm, record.label, np.ones(t, dtype=bool))


def load_split(dataset_dir, split: str) -> DatasetManifest:
    return load_manifest(manifest_path(dataset_dir, split))


@dataclass
class SyntheticSpec:
    """Recipe for a seeded synthetic dataset with planted class structure.

    `layer_informativeness[l]` scales the class-mean signal injected into
    layer l; `paralinguistic_gain` scales class signal injected only into
    the prosody block of the opensmile stream.
    """

    n_per_class: int
    layer_count: int
    feature_dim: int
    t_range: tuple[int, int]
    layer_informativeness: tuple[float, ...]
    paralinguistic_gain: float
    noise_sigma: float
    seed: int
    n_classes: int = N_CLASSES

    def __post_init__(self):
        self.t_range = (int(self.t_range[0]), int(self.t_range[1]))
        self.layer_informativeness = tuple(float(v) for v in self.layer_informativeness)
        if self.n_classes != N_CLASSES:
            raise ValueError(f"n_classes must be {N_CLASSES}, got {self.n_classes}")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if len(self.layer_informativeness) != self.layer_count:
            raise ValueError("layer_informativeness length must equal layer_count")
        if any(not 0.0 <= v <= 1.0 for v in self.layer_informativeness):
            raise ValueError("layer_informativeness entries must lie in [0, 1]")
        if self.paralinguistic_gain < 0:
            raise ValueError("paralinguistic_gain must be >= 0")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be > 0")
        if self.t_range[0] < 1 or self.t_range[0] > self.t_range[1]:
            raise ValueError(f"invalid t_range {self.t_range}")

    def to_json(self) -> dict:
        return {
            "n_per_class": self.n_per_class,
            "n_classes": self.n_classes,
            "layer_count": self.layer_count,
            "feature_dim": self.feature_dim,
            "t_range": list(self.t_range),
            "layer_informativeness": list(self.layer_informativeness),
            "paralinguistic_gain": self.paralinguistic_gain,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        return cls(
            n_per_class=int(doc["n_per_class"]),
            layer_count=int(doc["layer_count"]),
            feature_dim=int(doc["feature_dim"]),
            t_range=tuple(doc["t_range"]),
            layer_informativeness=tuple(doc["layer_informativeness"]),
            paralinguistic_gain=float(doc["paralinguistic_gain"]),
            noise_sigma=float(doc["noise_sigma"]),
            seed=int(doc["seed"]),
            n_classes=int(doc.get("n_classes", N_CLASSES)),
        )


def separated_unit_vectors(rng, n: int, dim: int, max_dot: float = 0.2, max_tries: int = 20000):
    """Draw n unit vectors with pairwise dot products <= max_dot (rejection sampled)."""
    rows: list[np.ndarray] = []
    tries = 0
    while len(rows) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {n} separated vectors in {dim} dims")
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            continue
        v = v / norm
        if all(float(v @ r) <= max_dot for r in rows):
            rows.append(v)
    return np.stack(rows)


def synthetic_class_means(spec: SyntheticSpec):
    """Seeded class-mean directions: (layer_count, n_classes, D) and prosody (n_classes, 6).

    Regenerable without touching any generated files, so tests can use the
    true means as a nearest-class-mean oracle.
    """
    rng = np.random.default_rng([spec.seed, 1])
    mu = np.stack(
        [separated_unit_vectors(rng, spec.n_classes, spec.feature_dim) for _ in range(spec.layer_count)]
    )
    nu = separated_unit_vectors(rng, spec.n_classes, PROSODY_COLS.stop - PROSODY_COLS.start)
    return mu, nu


def _split_sizes(n: int) -> tuple[int, int, int]:
    """Largest-remainder allocation of n items to the 80/10/10 splits."""
    exact = [f * n for f in SPLIT_FRACTIONS]
    sizes = [math.floor(e) for e in exact]
    remainders = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in range(n - sum(sizes)):
        sizes[remainders[i]] += 1
    return tuple(sizes)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict[str, DatasetManifest]:
    """Write a synthetic dataset under out_dir and return its three manifests.

    Deterministic for a fixed spec: all draws come from generators seeded
    off spec.seed, and files are written in a fixed order.
    """
    out_dir = Path(out_dir)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    mu, nu = synthetic_class_means(spec)
    data_rng = np.random.default_rng([spec.seed, 2])
    split_rng = np.random.default_rng([spec.seed, 3])
    info = np.asarray(spec.layer_informativeness)

    records: list[ManifestRecord] = []
    t_lo, t_hi = spec.t_range
    for label in range(spec.n_classes):
        for _ in range(spec.n_per_class):
            idx = len(records)
            utt_id = f"utt{idx:05d}"
            utt_dir = out_dir / "feats" / utt_id
            utt_dir.mkdir(exist_ok=True)
            t = int(data_rng.integers(t_lo, t_hi + 1))
            noise = data_rng.standard_normal((spec.layer_count, t, spec.feature_dim))
            frames = spec.noise_sigma * noise + info[:, None, None] * mu[:, label][:, None, :]
            layer_paths = []
            for layer in range(spec.layer_count):
                rel = f"feats/{utt_id}/layer_{layer:02d}.dsqf"
                write_feature_file(
                    FeatureSequence(frames[layer], stream_id=f"layer:{layer}"), out_dir / rel
                )
                layer_paths.append(rel)
            t_os = math.ceil(t / 2)
            osm = spec.noise_sigma * data_rng.standard_normal((t_os, OPENSMILE_DIM))
            osm[:, PROSODY_COLS] += spec.paralinguistic_gain * nu[label]
            osm_rel = f"feats/{utt_id}/opensmile.dsqf"
            write_feature_file(FeatureSequence(osm, stream_id="osm"), out_dir / osm_rel)
            records.append(ManifestRecord(utt_id, layer_paths, label, osm_rel))

    by_split: dict[str, list[ManifestRecord]] = {s: [] for s in SPLITS}
    for label in range(spec.n_classes):
        members = [r for r in records if r.label == label]
        order = split_rng.permutation(len(members))
        sizes = _split_sizes(len(members))
        start = 0
        for split, size in zip(SPLITS, sizes):
            by_split[split].extend(members[i] for i in order[start : start + size])
            start += size

    manifests = {}
    for split in SPLITS:
        recs = sorted(by_split[split], key=lambda r: r.utt_id)
        manifest = DatasetManifest(recs, spec.layer_count, spec.feature_dim, split, out_dir)
        save_manifest(manifest, manifest_path(out_dir, split))
        manifests[split] = manifest
    return manifests
