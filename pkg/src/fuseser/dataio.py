"""Feature files, manifests, label vocabulary and the synthetic corpus generator.

Feature file layout (little-endian)::

    b"FT1\\n" | rows: uint32 | cols: uint32 | rows*cols float32, row-major
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, IngestionError

MAGIC = b"FT1\n"
HEADER = struct.Struct("<4sII")
DEFAULT_LABELS = ("angry", "contempt", "disgust", "fear", "happy", "neutral", "sad", "surprise")
DEFAULT_DROP = ("X", "O")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_feature(x) -> bytes:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ConfigError(f"feature must be 1-D or 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ConfigError("refusing to write non-finite feature values")
    rows, cols = arr.shape
    return HEADER.pack(MAGIC, rows, cols) + arr.astype("<f4").tobytes(order="C")


def write_feature(x, path: str | os.PathLike) -> None:
    """Write a (T, D) matrix; 1-D input is stored as a single column."""
    _atomic_write(Path(path), encode_feature(x))


def decode_feature(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < HEADER.size:
        raise IngestionError(f"{source}: truncated header ({len(buf)} bytes) at offset 0")
    magic, rows, cols = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        bad = next(i for i in range(4) if magic[i] != MAGIC[i])
        raise IngestionError(f"{source}: bad magic {magic!r} at byte offset {bad}")
    expected = HEADER.size + 4 * rows * cols
    if len(buf) != expected:
        raise IngestionError(
            f"{source}: payload length mismatch at byte offset {min(len(buf), expected)}: "
            f"file has {len(buf)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(buf, dtype="<f4", offset=HEADER.size).reshape(rows, cols)
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise IngestionError(
            f"{source}: non-finite value at byte offset {HEADER.size + 4 * int(bad[0])}"
        )
    return arr.astype(np.float32)


def read_feature(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise IngestionError(f"feature file not found: {path}") from exc
    return decode_feature(buf, str(path))


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ids_digest(ids: Iterable[str]) -> str:
    """Digest of an evaluation split: order-independent hash of utterance ids."""
    h = hashlib.sha256()
    for i in sorted(ids):
        h.update(i.encode())
        h.update(b"\0")
    return h.hexdigest()


@dataclass
class LabelVocabulary:
    labels: list[str] = field(default_factory=lambda: list(DEFAULT_LABELS))
    drop: list[str] = field(default_factory=lambda: list(DEFAULT_DROP))

    def __post_init__(self) -> None:
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"duplicate labels in vocabulary: {self.labels}")
        overlap = set(self.labels) & set(self.drop)
        if overlap:
            raise ConfigError(f"labels {sorted(overlap)} are both kept and dropped")
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise IngestionError(f"unknown label {label!r}") from None

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "drop": list(self.drop)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LabelVocabulary":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise IngestionError(f"vocabulary file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{path}: invalid JSON: {exc}") from exc
        if isinstance(d, list):
            return cls(labels=list(d))
        return cls(labels=list(d["labels"]), drop=list(d.get("drop", DEFAULT_DROP)))

    def save(self, path: str | os.PathLike) -> None:
        _atomic_write(Path(path), (json.dumps(self.to_dict(), indent=2) + "\n").encode())


@dataclass
class Example:
    id: str
    label: int
    speech: np.ndarray
    text: np.ndarray
    f0: Optional[np.ndarray] = None
    mel: Optional[np.ndarray] = None
    spectral: Optional[np.ndarray] = None
    split: Optional[str] = None


@dataclass
class Dataset:
    examples: list[Example]
    dropped: int
    vocab: LabelVocabulary
    digest: str

    def __len__(self) -> int:
        return len(self.examples)

    def split(self, name: str) -> list[Example]:
        return [ex for ex in self.examples if ex.split == name]


def read_manifest(path: str | os.PathLike) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as exc:
        raise IngestionError(f"manifest not found: {path}") from exc
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{path}:{n}: invalid JSON: {exc}") from exc
        for key in ("id", "label", "speech_path", "text_path"):
            if key not in rec:
                raise IngestionError(f"{path}:{n}: missing field {key!r}")
        records.append(rec)
    return records


def load_dataset(
    manifest: str | os.PathLike,
    vocab: LabelVocabulary,
    split: str | None = None,
) -> Dataset:
    """Load every record whose label is not in the drop list.

    Paths in the manifest are resolved relative to the manifest's directory.
    ``split`` keeps only records whose optional ``split`` field matches.
    """
    manifest = Path(manifest)
    root = manifest.parent
    records = read_manifest(manifest)
    if split is not None:
        records = [r for r in records if r.get("split") == split]
    examples: list[Example] = []
    seen: set[str] = set()
    dropped = 0
    for rec in records:
        if rec["label"] in vocab.drop:
            dropped += 1
            continue
        uid = str(rec["id"])
        if uid in seen:
            raise IngestionError(f"duplicate utterance id {uid!r}")
        seen.add(uid)

        def opt(key: str) -> Optional[np.ndarray]:
            p = rec.get(key)
            return None if p is None else read_feature(root / p)

        f0 = opt("f0_path")
        if f0 is not None:
            if f0.shape[1] != 1:
                raise IngestionError(f"{uid}: F0 file must have 1 column, has {f0.shape[1]}")
            f0 = f0[:, 0]
            if (f0 < 0).any():
                raise IngestionError(f"{uid}: negative F0 value")
        spectral = opt("spectral_path")
        examples.append(
            Example(
                id=uid,
                label=vocab.index(rec["label"]),
                speech=read_feature(root / rec["speech_path"]),
                text=read_feature(root / rec["text_path"]),
                f0=f0,
                mel=opt("mel_path"),
                spectral=None if spectral is None else spectral.reshape(-1),
                split=rec.get("split"),
            )
        )
    if not examples:
        raise IngestionError(f"{manifest}: no examples")
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    return Dataset(examples, dropped, vocab, digest)


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    per_class: int = 200
    speech_dim: int = 64
    text_dim: int = 48
    mel_bands: int = 16
    separation: float = 4.0
    seed: int = 0
    f0_only: bool = False
    val_fraction: float = 0.2
    min_frames: int = 4
    max_frames: int = 12
    spectral_dim: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.per_class < 1:
            raise ConfigError(f"per_class must be >= 1, got {self.per_class}")
        for name in ("speech_dim", "text_dim", "mel_bands"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if not 3 <= self.min_frames <= self.max_frames:
            raise ConfigError("need 3 <= min_frames <= max_frames")


def _class_means(rng: np.random.Generator, k: int, dim: int, separation: float) -> np.ndarray:
    # each class mean sits at distance `separation` (in noise sigmas) from the origin
    m = rng.standard_normal((k, dim))
    return separation * m / np.linalg.norm(m, axis=1, keepdims=True)


def synthetic_vocab(num_classes: int) -> LabelVocabulary:
    if num_classes <= len(DEFAULT_LABELS):
        return LabelVocabulary(list(DEFAULT_LABELS[:num_classes]))
    return LabelVocabulary([f"class_{i}" for i in range(num_classes)])


def gen_synthetic(out_dir: str | os.PathLike, spec: SyntheticSpec) -> Path:
    """Write a labelled synthetic corpus under ``out_dir``; returns the manifest path.

    Per class: speech/text frames are the class mean plus unit Gaussian noise,
    F0 is ``120 + 40 c`` Hz plus jitter with 20% unvoiced frames. With
    ``f0_only`` every class shares the same speech/text/mel means so only F0
    carries the label.
    """
    spec.validate()
    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    k = spec.num_classes
    if spec.f0_only:
        speech_means = np.repeat(_class_means(rng, 1, spec.speech_dim, spec.separation), k, 0)
        text_means = np.repeat(_class_means(rng, 1, spec.text_dim, spec.separation), k, 0)
        mel_means = np.repeat(_class_means(rng, 1, spec.mel_bands, spec.separation), k, 0)
    else:
        speech_means = _class_means(rng, k, spec.speech_dim, spec.separation)
        text_means = _class_means(rng, k, spec.text_dim, spec.separation)
        mel_means = _class_means(rng, k, spec.mel_bands, spec.separation)
    spectral_means = (
        _class_means(rng, k, spec.spectral_dim, spec.separation) if spec.spectral_dim else None
    )
    vocab = synthetic_vocab(k)
    n_val = int(round(spec.per_class * spec.val_fraction))

    records = []
    for c in range(k):
        for i in range(spec.per_class):
            uid = f"syn_{c:02d}_{i:05d}"
            t_s = int(rng.integers(spec.min_frames, spec.max_frames + 1))
            t_t = int(rng.integers(spec.min_frames, spec.max_frames + 1))
            t_f = int(rng.integers(spec.min_frames, spec.max_frames + 1)) * 2
            speech = speech_means[c] + rng.standard_normal((t_s, spec.speech_dim))
            text = text_means[c] + rng.standard_normal((t_t, spec.text_dim))
            mel = mel_means[c] + rng.standard_normal((t_s, spec.mel_bands))
            f0 = 120.0 + 40.0 * c + 5.0 * rng.standard_normal(t_f)
            f0[rng.random(t_f) < 0.2] = 0.0
            rec = {
                "id": uid,
                "label": vocab.labels[c],
                "speech_path": f"feats/{uid}.speech.ft",
                "text_path": f"feats/{uid}.text.ft",
                "f0_path": f"feats/{uid}.f0.ft",
                "mel_path": f"feats/{uid}.mel.ft",
                "split": "val" if i < n_val else "train",
            }
            write_feature(speech, out / rec["speech_path"])
            write_feature(text, out / rec["text_path"])
            write_feature(f0, out / rec["f0_path"])
            write_feature(mel, out / rec["mel_path"])
            if spectral_means is not None:
                rec["spectral_path"] = f"feats/{uid}.spec.ft"
                write_feature(
                    spectral_means[c] + rng.standard_normal(spec.spectral_dim),
                    out / rec["spectral_path"],
                )
            records.append(rec)
    manifest = out / "manifest.jsonl"
    _atomic_write(manifest, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode())
    vocab.save(out / "vocab.json")
    return manifest


def corpus_digest(root: str | os.PathLike) -> str:
    """Digest over every file under ``root`` (relative path + bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def label_counts(labels: Sequence[int], num_classes: int) -> list[int]:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).tolist()
