"""Per-class feature prototypes and Gaussian pseudo-feature replay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PrototypeEntry:
    class_id: int
    mu: np.ndarray
    var: np.ndarray
    n: int
    source: str = "ground-truth"

    def __post_init__(self):
        for name in ("mu", "var"):
            arr = np.array(getattr(self, name), dtype=np.float64).ravel()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.n < 1:
            raise ValueError("prototype needs at least one sample")
        if self.mu.shape != self.var.shape:
            raise ValueError("mu and var must have the same length")
        if np.any(self.var < 0):
            raise ValueError("variance entries must be non-negative")


def compute_prototypes(features: np.ndarray, labels, class_ids, source: str = "ground-truth"):
    """Population mean and variance of ``features`` for each id in ``class_ids``.

    Returns ``(entries, missing)`` where ``missing`` lists ids with no samples.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.size == 0 or features.shape[0] == 0:
        raise ValueError("cannot compute prototypes from an empty feature matrix")
    entries: dict[int, PrototypeEntry] = {}
    missing = []
    for c in class_ids:
        rows = features[labels == c]
        if rows.shape[0] == 0:
            missing.append(int(c))
            continue
        mu = rows.mean(axis=0)
        var = ((rows - mu) ** 2).mean(axis=0)
        entries[int(c)] = PrototypeEntry(int(c), mu, var, rows.shape[0], source)
    return entries, missing


def sample_pseudo_features(entry: PrototypeEntry, n_p: int, seed) -> np.ndarray:
    """Draw ``n_p`` rows of mu + e with e ~ N(0, diag(var)).

    ``seed`` may be an int, a seed sequence or a ``Generator``.
    """
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.standard_normal((n_p, entry.mu.shape[0])) * np.sqrt(entry.var)
    return entry.mu + noise


class PrototypeStore:
    """Write-once mapping from class id to PrototypeEntry."""

    def __init__(self):
        self._entries: dict[int, PrototypeEntry] = {}

    def add(self, entry: PrototypeEntry) -> None:
        if entry.class_id in self._entries:
            raise KeyError(f"prototype for class {entry.class_id} already stored")
        self._entries[entry.class_id] = entry

    def update(self, entries) -> None:
        for e in (entries.values() if isinstance(entries, dict) else entries):
            self.add(e)

    def __getitem__(self, c: int) -> PrototypeEntry:
        return self._entries[c]

    def __contains__(self, c) -> bool:
        return c in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def class_ids(self) -> list[int]:
        return sorted(self._entries)

    def entries(self) -> list[PrototypeEntry]:
        return [self._entries[c] for c in self.class_ids()]

    def means(self) -> np.ndarray:
        return np.vstack([e.mu for e in self.entries()])

    def blocks(self) -> dict[str, np.ndarray]:
        out = {}
        for e in self.entries():
            out[f"proto.mu.{e.class_id}"] = e.mu.reshape(1, -1)
            out[f"proto.var.{e.class_id}"] = e.var.reshape(1, -1)
            out[f"proto.n.{e.class_id}"] = np.array([[e.n, e.source == "predicted"]], dtype=np.float64)
        return out

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray]) -> PrototypeStore:
        store = cls()
        ids = sorted(int(k.rsplit(".", 1)[1]) for k in blocks if k.startswith("proto.mu."))
        for c in ids:
            n, pred = blocks[f"proto.n.{c}"][0] if f"proto.n.{c}" in blocks else (1.0, 0.0)
            store.add(PrototypeEntry(c, blocks[f"proto.mu.{c}"][0].copy(), blocks[f"proto.var.{c}"][0].copy(),
                                     int(n), "predicted" if pred else "ground-truth"))
        return store
