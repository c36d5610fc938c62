"""Learnable components and the FEAC checkpoint container."""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .diffkernel import Node

CHECKPOINT_MAGIC = b"FEAC"
CHECKPOINT_VERSION = 1


class Encoder:
    """Feature extractor f(.).

    ``identity`` mode passes inputs through and owns no parameters. ``mlp``
    mode is a stack of affine layers with relu between them; ``out_relu``
    also rectifies the last layer. ``residual`` adds the mlp output to the
    input, with the last layer initialised at ``residual_init`` scale.
    """

    def __init__(self, input_dim: int, feature_dim: int, mode: str = "mlp", hidden: int | None = None,
                 n_layers: int = 2, out_relu: bool = False, rng: np.random.Generator | None = None,
                 layers: list[tuple[np.ndarray, np.ndarray]] | None = None, residual_init: float = 0.1):
        if mode not in ("identity", "mlp", "residual"):
            raise ValueError(f"unknown encoder mode {mode!r}")
        if mode in ("identity", "residual") and input_dim != feature_dim:
            raise ValueError(f"{mode} encoder needs input_dim == feature_dim")
        self.input_dim = input_dim
        self.feature_dim = feature_dim
        self.mode = mode
        self.out_relu = out_relu
        self.layers: list[tuple[Node, Node]] = []
        if mode == "identity":
            return
        if layers is not None:
            self.layers = [(dk.parameter(w), dk.parameter(b)) for w, b in layers]
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            hidden = hidden or 2 * feature_dim
            dims = [input_dim] + [hidden] * (n_layers - 1) + [feature_dim]
            for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
                gain = 2.0 if i < n_layers - 1 else 1.0
                w = rng.normal(0.0, np.sqrt(gain / din), size=(din, dout))
                if mode == "residual" and i == n_layers - 1:
                    w *= residual_init
                self.layers.append((dk.parameter(w), dk.parameter(np.zeros((1, dout)))))
        for w, b in self.layers:
            if not (np.all(np.isfinite(w.data)) and np.all(np.isfinite(b.data))):
                raise ValueError("encoder parameters must be finite")

    def parameters(self) -> list[Node]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, x) -> Node:
        return encode(self, x)


def encode(enc: Encoder, batch) -> Node:
    x = batch if isinstance(batch, Node) else dk.constant(batch)
    if x.shape[1] != enc.input_dim:
        raise dk.ShapeError(f"encoder expects {enc.input_dim} columns, got {x.shape[1]}")
    if enc.mode == "identity":
        return x
    inp = x
    last = len(enc.layers) - 1
    for i, (w, b) in enumerate(enc.layers):
        x = dk.add(dk.matmul(x, w), b)
        if i < last or enc.out_relu:
            x = dk.relu(x)
    return dk.add(inp, x) if enc.mode == "residual" else x


class CosineClassifier:
    """Unified cosine classifier; row k of ``weight`` is the centroid of class k."""

    def __init__(self, weight: np.ndarray, scale: float = 10.0):
        weight = np.asarray(weight, dtype=np.float64)
        if scale <= 0:
            raise ValueError("scale must be positive")
        if weight.shape[0] and np.any(np.linalg.norm(weight, axis=1) == 0):
            raise ValueError("classifier rows must have non-zero norm")
        self.weight = dk.parameter(weight)
        self.scale = float(scale)

    @classmethod
    def empty(cls, feature_dim: int, scale: float = 10.0) -> CosineClassifier:
        return cls(np.zeros((0, feature_dim)), scale)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Node]:
        return [self.weight]

    def __call__(self, features) -> Node:
        return classify(self, features)


def classify(clf: CosineClassifier, features) -> Node:
    h = features if isinstance(features, Node) else dk.constant(features)
    if h.shape[1] != clf.feature_dim:
        raise dk.ShapeError(f"classifier expects {clf.feature_dim}-d features, got {h.shape[1]}")
    return dk.scale(dk.cosine_matrix(h, clf.weight), clf.scale)


def extend_classifier(clf: CosineClassifier, n_new: int, seed, std: float = 0.02) -> CosineClassifier:
    """Append ``n_new`` unit-norm rows drawn from a seeded Gaussian. Old rows are copied verbatim."""
    if n_new < 0:
        raise ValueError("n_new must be non-negative")
    if n_new == 0:
        return clf
    rng = np.random.default_rng(seed)
    fresh = rng.normal(0.0, std, size=(n_new, clf.feature_dim))
    fresh /= np.linalg.norm(fresh, axis=1, keepdims=True)
    return CosineClassifier(np.vstack([clf.weight.data, fresh]), clf.scale)


class ProjectionHead:
    """Two-layer perceptron used for the contrastive projector and the prototype projector g(.)."""

    def __init__(self, input_dim: int, output_dim: int, hidden: int | None = None, purpose: str = "contrastive",
                 rng: np.random.Generator | None = None, weights: list[np.ndarray] | None = None):
        if purpose not in ("contrastive", "bap"):
            raise ValueError(f"unknown head purpose {purpose!r}")
        self.purpose = purpose
        self.output_dim = output_dim
        if weights is not None:
            self.w1, self.b1, self.w2, self.b2 = (dk.parameter(w) for w in weights)
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden or 2 * input_dim
        self.w1 = dk.parameter(rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, hidden)))
        self.b1 = dk.parameter(np.zeros((1, hidden)))
        self.w2 = dk.parameter(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, output_dim)))
        self.b2 = dk.parameter(np.zeros((1, output_dim)))

    def parameters(self) -> list[Node]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x) -> Node:
        x = x if isinstance(x, Node) else dk.constant(x)
        hid = dk.relu(dk.add(dk.matmul(x, self.w1), self.b1))
        return dk.add(dk.matmul(hid, self.w2), self.b2)


class TeacherSnapshot:
    """Frozen copy of the encoder from the previous session."""

    def __init__(self, enc: Encoder):
        self._enc = copy.deepcopy(enc)
        for p in self._enc.parameters():
            p.requires_grad = False
            p.zero_grad()

    def parameters(self) -> list[Node]:
        return self._enc.parameters()

    def __call__(self, x) -> Node:
        return encode(self._enc, x)


def snapshot_teacher(enc: Encoder) -> TeacherSnapshot:
    return TeacherSnapshot(enc)


@dataclass
class ModelState:
    encoder: Encoder
    classifier: CosineClassifier
    contrastive_head: ProjectionHead | None = None
    bap_head: ProjectionHead | None = None
    teacher: TeacherSnapshot | None = None
    frozen_layers: int = 0
    extra: dict = field(default_factory=dict)

    def trainable(self) -> list[Node]:
        enc = [p for i, layer in enumerate(self.encoder.layers) if i >= self.frozen_layers for p in layer]
        params = enc + self.classifier.parameters()
        for head in (self.contrastive_head, self.bap_head):
            if head is not None:
                params += head.parameters()
        return params

    def blocks(self) -> dict[str, np.ndarray]:
        enc = self.encoder
        mode_code = ("mlp", "identity", "residual").index(enc.mode)
        out = {"encoder.meta": np.array([[enc.input_dim, enc.feature_dim, mode_code, float(enc.out_relu)]],
                                        dtype=np.float64)}
        for i, (w, b) in enumerate(enc.layers):
            out[f"encoder.{i}.weight"] = w.data
            out[f"encoder.{i}.bias"] = b.data
        out["classifier.weight"] = self.classifier.weight.data
        out["classifier.scale"] = np.array([[self.classifier.scale]])
        for name, head in (("contrastive", self.contrastive_head), ("bap", self.bap_head)):
            if head is not None:
                for pname, p in zip(("w1", "b1", "w2", "b2"), head.parameters()):
                    out[f"head.{name}.{pname}"] = p.data
        return out

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray]) -> ModelState:
        in_dim, feat_dim, mode_code, out_relu = blocks["encoder.meta"][0]
        layers = []
        i = 0
        while f"encoder.{i}.weight" in blocks:
            layers.append((blocks[f"encoder.{i}.weight"], blocks[f"encoder.{i}.bias"]))
            i += 1
        enc = Encoder(int(in_dim), int(feat_dim), mode=("mlp", "identity", "residual")[int(mode_code)],
                      out_relu=bool(out_relu), layers=layers or None)
        clf = CosineClassifier(blocks["classifier.weight"], float(blocks["classifier.scale"][0, 0]))
        heads = {}
        for name in ("contrastive", "bap"):
            if f"head.{name}.w1" in blocks:
                ws = [blocks[f"head.{name}.{p}"] for p in ("w1", "b1", "w2", "b2")]
                heads[name] = ProjectionHead(ws[0].shape[0], ws[2].shape[1], purpose=name, weights=ws)
        return cls(enc, clf, heads.get("contrastive"), heads.get("bap"))


# ---------------------------------------------------------------- checkpoint container


class CheckpointError(ValueError):
    pass


def write_blocks(path, blocks: dict[str, np.ndarray]) -> None:
    """Write named float64 matrices as a FEAC container (little-endian)."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, mat in blocks.items():
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim == 1:
            mat = mat.reshape(1, -1)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *mat.shape))
        parts.append(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_blocks(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(buf) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    blocks: dict[str, np.ndarray] = {}
    while pos < len(buf):
        if pos + 2 > len(buf):
            raise CheckpointError(f"truncated block header at byte {pos}")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + nlen + 8 > len(buf):
            raise CheckpointError(f"truncated block header at byte {pos}")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rows, cols = struct.unpack_from("<II", buf, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(buf):
            raise CheckpointError(f"block {name!r} truncated: need {nbytes} bytes, have {len(buf) - pos}")
        blocks[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    return blocks
