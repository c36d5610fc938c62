"""Synthetic embedding data, embedding files, two-view augmentation and session splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMBED_MAGIC = b"CNCD"
EMBED_VERSION = 1


class DataError(ValueError):
    pass


class BadMagicError(DataError):
    pass


class BadVersionError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class LabelRangeError(DataError):
    pass


@dataclass
class EmbeddingDataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    n_classes: int | None = None
    split: np.ndarray | None = None  # per-row tag, "train" or "test"
    centers: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D array")
        if not np.all(np.isfinite(self.features)):
            raise DataError("feature rows must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise DataError(f"expected {self.n} labels, got {self.labels.shape}")
            if self.n_classes is None:
                self.n_classes = int(self.labels.max()) + 1 if self.n else 0
            if self.n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise LabelRangeError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, mask) -> EmbeddingDataset:
        mask = np.asarray(mask)
        return EmbeddingDataset(self.features[mask], None if self.labels is None else self.labels[mask],
                                self.n_classes, None if self.split is None else self.split[mask])

    def train(self) -> EmbeddingDataset:
        return self if self.split is None else self.subset(self.split == "train")

    def test(self) -> EmbeddingDataset:
        if self.split is None:
            raise DataError("dataset carries no train/test split")
        return self.subset(self.split == "test")


class UnlabeledView:
    """Feature-only handle given to the engine during discovery sessions."""

    __slots__ = ("_features",)

    def __init__(self, features: np.ndarray):
        self._features = np.asarray(features, dtype=np.float64)

    @property
    def features(self) -> np.ndarray:
        return self._features

    @property
    def n(self) -> int:
        return self._features.shape[0]


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    n_classes: int
    d: int
    train_per_class: int
    test_per_class: int
    within_std: float = 1.0
    separation: float = 8.0
    radius: float | None = None
    seed: int = 0

    def resolved_radius(self) -> float:
        # Random directions in moderate dimension sit ~sqrt(2) apart, so this clears most draws.
        return self.radius if self.radius is not None else 1.25 * self.separation * max(self.within_std, 1e-12)


def _min_pairwise(centers: np.ndarray) -> float:
    if centers.shape[0] < 2:
        return np.inf
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return float(dist[np.triu_indices(centers.shape[0], 1)].min())


def generate_synthetic(spec: SyntheticSpec) -> EmbeddingDataset:
    """Gaussian clusters around random sphere directions scaled to ``radius``.

    Center sets whose minimum pairwise distance over ``within_std`` falls
    below ``separation`` are resampled, up to 100 attempts.
    """
    if min(spec.n_classes, spec.train_per_class, spec.test_per_class) < 1 or spec.d < 2:
        raise DataError("synthetic spec needs positive counts and d >= 2")
    rng = np.random.default_rng(spec.seed)
    radius = spec.resolved_radius()
    best = 0.0
    for _ in range(100):
        dirs = rng.standard_normal((spec.n_classes, spec.d))
        centers = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        dmin = _min_pairwise(centers)
        factor = dmin / spec.within_std if spec.within_std > 0 else np.inf
        best = max(best, factor)
        if factor >= spec.separation:
            break
    else:
        raise DataError(f"separation {spec.separation} unattainable in 100 attempts; best factor {best:.3f}")
    per = spec.train_per_class + spec.test_per_class
    feats, labels, split = [], [], []
    for c in range(spec.n_classes):
        feats.append(centers[c] + spec.within_std * rng.standard_normal((per, spec.d)))
        labels.append(np.full(per, c))
        split.append(np.array(["train"] * spec.train_per_class + ["test"] * spec.test_per_class))
    return EmbeddingDataset(np.vstack(feats), np.concatenate(labels), spec.n_classes, np.concatenate(split), centers)


# ---------------------------------------------------------------- augmentation


def augment_two_views(batch: np.ndarray, noise_std: float, mask_rate: float, seed):
    """Two independent noisy, coordinate-masked copies of ``batch``."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if not 0.0 <= mask_rate < 1.0:
        raise ValueError("mask_rate must lie in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    batch = np.asarray(batch, dtype=np.float64)
    views = []
    for _ in range(2):
        v = batch + rng.normal(0.0, noise_std, size=batch.shape) if noise_std > 0 else batch.copy()
        if mask_rate > 0:
            v = v * (rng.random(batch.shape) >= mask_rate)
        views.append(v)
    return views[0], views[1]


# ---------------------------------------------------------------- files


def save_embeddings(ds: EmbeddingDataset, path) -> None:
    has_labels = ds.labels is not None
    parts = [EMBED_MAGIC, struct.pack("<IIIB", EMBED_VERSION, ds.n, ds.d, int(has_labels)),
             np.ascontiguousarray(ds.features, dtype="<f4").tobytes()]
    if has_labels:
        parts.append(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_embeddings(path, n_classes: int | None = None) -> EmbeddingDataset:
    """Read a CNCD binary embedding file, or the ``dim=<d>`` text fixture format."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"embedding file not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != EMBED_MAGIC:
        if buf.lstrip()[:4] == b"dim=":
            return _load_text(buf.decode("utf-8"), n_classes)
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {EMBED_MAGIC!r}")
    header = 4 + 13
    if len(buf) < header:
        raise TruncatedFileError(f"truncated header: expected {header} bytes, got {len(buf)}")
    version, n, d, has_labels = struct.unpack_from("<IIIB", buf, 4)
    if version != EMBED_VERSION:
        raise BadVersionError(f"unsupported embedding file version {version}")
    expected = header + 4 * n * d + (4 * n if has_labels else 0)
    if len(buf) != expected:
        raise TruncatedFileError(f"expected {expected} bytes, got {len(buf)}")
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=header).reshape(n, d).astype(np.float64)
    labels = None
    if has_labels:
        labels = np.frombuffer(buf, dtype="<i4", count=n, offset=header + 4 * n * d).astype(np.int64)
        _check_labels(labels, n_classes)
    return EmbeddingDataset(feats, labels, n_classes)


def _check_labels(labels, n_classes):
    if labels.size and labels.min() < 0:
        raise LabelRangeError(f"negative label {int(labels.min())}")
    if n_classes is not None and labels.size and labels.max() >= n_classes:
        raise LabelRangeError(f"label {int(labels.max())} out of range for {n_classes} classes")


def _load_text(text: str, n_classes: int | None) -> EmbeddingDataset:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    d = int(lines[0].split("=", 1)[1])
    rows = [[float(x) for x in ln.split(",")] for ln in lines[1:]]
    if any(len(r) not in (d, d + 1) for r in rows):
        raise DataError(f"text rows must have {d} or {d + 1} fields")
    has_labels = bool(rows) and len(rows[0]) == d + 1
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), -1)
    labels = arr[:, d].astype(np.int64) if has_labels else None
    if labels is not None:
        _check_labels(labels, n_classes)
    return EmbeddingDataset(arr[:, :d], labels, n_classes)


# ---------------------------------------------------------------- protocol split


@dataclass
class SessionProtocol:
    base_classes: int
    novel_per_session: list[int] = field(default_factory=list)
    shuffle_classes: bool = False

    @property
    def T(self) -> int:
        return len(self.novel_per_session)

    @property
    def total_classes(self) -> int:
        return self.base_classes + sum(self.novel_per_session)


@dataclass
class SessionData:
    session: int
    classes: list[int]
    train: EmbeddingDataset | UnlabeledView
    test: EmbeddingDataset
    # Labels of an unlabeled training split, kept for offline diagnostics only.
    hidden_train_labels: np.ndarray | None = None


def split_protocol(ds: EmbeddingDataset, protocol: SessionProtocol, seed=0,
                   test_fraction: float = 0.2) -> list[SessionData]:
    """Assign classes to sessions and strip labels from discovery-session training data.

    Rows tagged ``test`` form the test splits; untagged datasets are split per
    class with ``test_fraction`` under ``seed``.
    """
    if ds.labels is None:
        raise DataError("protocol splitting needs a labeled dataset")
    n_classes = ds.n_classes if ds.n_classes is not None else int(ds.labels.max()) + 1
    if protocol.base_classes < 1 or any(k < 1 for k in protocol.novel_per_session):
        raise DataError("session sizes must be positive")
    if n_classes < protocol.total_classes:
        raise DataError(f"protocol needs {protocol.total_classes} classes, dataset has {n_classes}")
    rng = np.random.default_rng(seed)
    order = np.arange(n_classes)
    if protocol.shuffle_classes:
        order = rng.permutation(n_classes)
    split = ds.split
    if split is None:
        split = np.full(ds.n, "train", dtype=object)
        for c in range(n_classes):
            idx = np.flatnonzero(ds.labels == c)
            idx = idx[rng.permutation(idx.size)]
            n_test = int(round(test_fraction * idx.size))
            split[idx[:n_test]] = "test"
    sizes = [protocol.base_classes] + list(protocol.novel_per_session)
    bounds = np.cumsum([0] + sizes)
    sessions = []
    for t, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        classes = [int(c) for c in order[lo:hi]]
        in_group = np.isin(ds.labels, classes)
        tr = ds.subset(in_group & (split == "train"))
        te = ds.subset(in_group & (split == "test"))
        if t == 0:
            sessions.append(SessionData(0, classes, tr, te))
        else:
            sessions.append(SessionData(t, classes, UnlabeledView(tr.features), te, tr.labels.copy()))
    return sessions
