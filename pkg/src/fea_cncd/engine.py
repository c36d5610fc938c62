"""Session loop: supervised base session followed by unsupervised discovery sessions."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from . import losses as L
from .dataio import EmbeddingDataset, SessionData, UnlabeledView, augment_two_views
from .evalkit import (
    AssignmentPermutation,
    MetricsLedger,
    SessionEvaluation,
    evaluate_predictions,
    fix_permutation,
    metrics_document,
    remap_predictions,
)
from .model import (
    CosineClassifier,
    Encoder,
    ModelState,
    ProjectionHead,
    extend_classifier,
    read_blocks,
    snapshot_teacher,
    write_blocks,
)
from .protomem import PrototypeStore, compute_prototypes

log = logging.getLogger(__name__)

# independent RNG streams, each keyed by (seed, stream, session)
STREAM_DATA, STREAM_INIT, STREAM_NOISE = 0, 1, 2


class NumericalAbort(FloatingPointError):
    pass


class GradientFlowError(AssertionError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.01
    eps: float = 0.1
    omega: float = 2.0
    e: int = 30
    epochs_base: int = 10
    epochs_inc: int = 200
    batch_size: int = 128
    lr_base: float = 0.1
    lr_inc: float = 0.1
    momentum: float = 0.9
    n_p: int = 8
    cosine_scale: float = 10.0
    seed: int = 0
    noise_std: float | None = None  # None: 0.1 x within-class std of the base data
    mask_rate: float = 0.1
    encoder_mode: str = "mlp"
    feature_dim: int | None = None
    freeze_all_but_last: bool = False
    use_css: bool = True
    use_bap: bool = True
    symmetrize_eq7: bool = False
    exclude_self_pairs: bool = False
    guide_to_classifier_only: bool = True  # L_guide trains the classifier, L_cl the encoder
    encoder_lr_scale: float = 1.0  # encoder step relative to lr_inc during discovery sessions
    check_grad_flow: bool = True

    def __post_init__(self):
        for name in ("lam", "eps", "omega", "lr_base", "lr_inc", "cosine_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.e < 1 or self.batch_size < 1 or self.n_p < 1:
            raise ValueError("e, batch_size and n_p must be positive")
        if self.epochs_base < 0 or self.epochs_inc < 0:
            raise ValueError("epoch counts must be non-negative")

    @classmethod
    def desk(cls, **kw) -> TrainConfig:
        """Synthetic-suite preset: 60 incremental epochs, identity encoder, eps = 1.

        With only two novel classes per session the guide term needs a larger
        weight to keep both novel rows alive; a trainable encoder drifts away
        from the stored prototypes at this scale.
        """
        kw.setdefault("epochs_inc", 60)
        kw.setdefault("eps", 1.0)
        kw.setdefault("encoder_mode", "identity")
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


@dataclass
class RunState:
    cfg: TrainConfig
    model: ModelState
    store: PrototypeStore
    ledger: MetricsLedger
    class_groups: list[list[int]]
    index_to_class: list[int]
    noise_std: float
    session: int = 0
    epoch: int = 0
    evaluations: list[SessionEvaluation] = field(default_factory=list)
    prediction_log: list[dict] = field(default_factory=list)
    tests: list[EmbeddingDataset] = field(default_factory=list)
    skipped_bap_steps: int = 0

    @property
    def class_to_index(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.index_to_class)}

    # checkpoint round trip
    def blocks(self) -> dict[str, np.ndarray]:
        out = self.model.blocks()
        out.update(self.store.blocks())
        out["run.session"] = np.array([[self.session]], dtype=np.float64)
        out["run.noise_std"] = np.array([[self.noise_std]])
        out["run.index_to_class"] = np.array([self.index_to_class], dtype=np.float64)
        for t, g in enumerate(self.class_groups):
            out[f"run.group.{t}"] = np.array([g], dtype=np.float64)
        out["ledger.matrix"] = self.ledger.matrix()
        out["ledger.overall"] = np.array([self.ledger.overall])
        for t, p in self.ledger.permutations.items():
            out[f"perm.{t}"] = np.array([p.mapping], dtype=np.float64)
        return out

    def save(self, path) -> None:
        write_blocks(path, self.blocks())

    @classmethod
    def load(cls, path, cfg: TrainConfig) -> RunState:
        b = read_blocks(path)
        model = ModelState.from_blocks(b)
        model.contrastive_head = model.bap_head = None
        n_sess = int(b["run.session"][0, 0]) + 1
        ledger = MetricsLedger.from_matrix(b["ledger.matrix"], b["ledger.overall"][0])
        for t in range(1, n_sess):
            ledger.permutations[t] = AssignmentPermutation(t, tuple(int(x) for x in b[f"perm.{t}"][0]))
        groups = [[int(x) for x in b[f"run.group.{t}"][0]] for t in range(n_sess)]
        return cls(cfg, model, PrototypeStore.from_blocks(b), ledger, groups,
                   [int(x) for x in b["run.index_to_class"][0]], float(b["run.noise_std"][0, 0]),
                   session=n_sess - 1)


def stream(seed: int, kind: int, session: int) -> np.random.Generator:
    return np.random.default_rng([seed, kind, session])


def _seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


class SGD:
    """SGD with momentum; learning rate set externally per epoch.

    ``lr_scales`` optionally multiplies the step of individual parameters.
    """

    def __init__(self, params: list[dk.Node], lr: float, momentum: float = 0.9, lr_scales=None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(params)
        self._vel = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        dk.zero_grad(self.params)

    def step(self) -> None:
        for p, v, s in zip(self.params, self._vel, self.lr_scales):
            v *= self.momentum
            v += p.grad
            p.data -= (self.lr * s) * v


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    if epochs <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / epochs))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def features_of(enc: Encoder, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    return np.vstack([enc(dk.constant(x[i:i + chunk])).data for i in range(0, max(len(x), 1), chunk)]) \
        if len(x) else np.zeros((0, enc.feature_dim))


def logits_of(model: ModelState, x: np.ndarray) -> np.ndarray:
    h = features_of(model.encoder, x)
    return model.classifier(dk.constant(h)).data


def within_class_std(ds: EmbeddingDataset) -> float:
    stds = [np.sqrt(ds.features[ds.labels == c].var(axis=0).mean()) for c in np.unique(ds.labels)]
    return float(np.mean(stds))


# ---------------------------------------------------------------- evaluation


def evaluate_session(state: RunState, tests: list[EmbeddingDataset]) -> SessionEvaluation:
    """Evaluate on the union of test sets for sessions 0..t using the frozen permutations."""
    t = len(tests) - 1
    missing = [s for s in range(1, t + 1) if s not in state.ledger.permutations]
    if missing:
        raise ValueError(f"missing frozen permutation for sessions {missing}")
    x = np.vstack([ds.features for ds in tests])
    y = np.concatenate([ds.labels for ds in tests])
    raw = logits_of(state.model, x).argmax(axis=1)
    ev = evaluate_predictions(remap_predictions(raw, state.index_to_class), y, state.class_groups[:t + 1])
    record = {"session": t, "predictions": raw.tolist(), "truths": y.tolist()}
    if t >= 1:
        novel = np.isin(y, state.class_groups[t])
        record["novel_predictions"] = _novel_argmax(state, x[novel], t).tolist()
    state.prediction_log.append(record)
    return ev


def _novel_block(state: RunState, t: int) -> np.ndarray:
    lo = sum(len(g) for g in state.class_groups[:t])
    return np.arange(lo, lo + len(state.class_groups[t]))


def _novel_argmax(state: RunState, x: np.ndarray, t: int) -> np.ndarray:
    block = _novel_block(state, t)
    return logits_of(state.model, x)[:, block].argmax(axis=1)


def _record(state: RunState, ev: SessionEvaluation) -> None:
    state.ledger.append(ev.row, ev.overall)
    state.evaluations.append(ev)
    log.info("session %d: a=%s overall=%.2f", state.session, [round(a, 2) for a in ev.row], ev.overall)


# ---------------------------------------------------------------- base session


def run_base_session(cfg: TrainConfig, data: SessionData) -> RunState:
    ds = data.train
    classes = list(data.classes)
    if not isinstance(ds, EmbeddingDataset) or ds.labels is None:
        raise ValueError("base session needs labeled training data")
    bad = np.setdiff1d(np.unique(ds.labels), classes)
    if bad.size:
        raise ValueError(f"base training label {int(bad[0])} is outside C^0")
    init = stream(cfg.seed, STREAM_INIT, 0)
    data_rng = stream(cfg.seed, STREAM_DATA, 0)
    fdim = cfg.feature_dim or ds.d
    enc = Encoder(ds.d, fdim, mode=cfg.encoder_mode, rng=init)
    clf = extend_classifier(CosineClassifier.empty(fdim, cfg.cosine_scale), len(classes), _seed_from(init))
    model = ModelState(enc, clf, frozen_layers=_frozen(cfg, enc))
    noise = cfg.noise_std if cfg.noise_std is not None else 0.1 * within_class_std(ds)
    state = RunState(cfg, model, PrototypeStore(), MetricsLedger(), [classes], list(classes), noise)

    idx = np.array([state.class_to_index[int(c)] for c in ds.labels])
    onehot = np.eye(len(classes))[idx]
    opt = SGD(model.trainable(), cfg.lr_base, cfg.momentum)
    for tau in range(cfg.epochs_base):
        state.epoch = tau
        opt.lr = cosine_lr(cfg.lr_base, tau, cfg.epochs_base)
        for b in _batches(ds.n, cfg.batch_size, data_rng):
            opt.zero_grad()
            h = enc(dk.constant(ds.features[b]))
            loss = L.cross_entropy(onehot[b], dk.softmax(clf(h)))
            if not math.isfinite(loss.item()):
                raise NumericalAbort(f"non-finite base loss at epoch {tau}")
            dk.backward(loss)
            opt.step()

    feats = features_of(enc, ds.features)
    entries, missing = compute_prototypes(feats, ds.labels, classes, "ground-truth")
    if missing:
        log.warning("base classes without samples: %s", missing)
    state.store.update(entries)
    state.tests = [data.test]
    _record(state, evaluate_session(state, state.tests))
    return state


def _frozen(cfg: TrainConfig, enc: Encoder) -> int:
    return max(len(enc.layers) - 1, 0) if cfg.freeze_all_but_last else 0


# ---------------------------------------------------------------- discovery session


@dataclass
class StepContext:
    """Per-session constants used by every incremental step."""

    t: int
    novel_idx: np.ndarray
    prior: np.ndarray
    known: list  # (classifier index, PrototypeEntry)
    known_mu: dk.Node | None


def incremental_losses(state: RunState, ctx: StepContext, x: np.ndarray, alpha: float,
                       rng: np.random.Generator) -> dict[str, dk.Node]:
    """Build every loss term for one mini-batch; ``parts["total"]`` is L_FEA."""
    cfg, m = state.cfg, state.model
    if m.teacher is None:
        raise ValueError("incremental step needs a teacher snapshot")
    view_a, view_b = augment_two_views(x, state.noise_std, cfg.mask_rate, rng)
    h_a, h_b = m.encoder(dk.constant(view_a)), m.encoder(dk.constant(view_b))
    if cfg.guide_to_classifier_only:
        p_a = dk.softmax(m.classifier(dk.constant(h_a.data)))
        p_b = dk.softmax(m.classifier(dk.constant(h_b.data)))
    else:
        p_a, p_b = dk.softmax(m.classifier(h_a)), dk.softmax(m.classifier(h_b))

    parts: dict[str, dk.Node] = {}
    pr = L.loss_pr(ctx.known, m.classifier, cfg.n_p, rng) if ctx.known else dk.constant(0.0)
    if cfg.lam:
        student = m.encoder(dk.constant(x))
        teacher = dk.constant(m.teacher(dk.constant(x)).data)
        parts["old"] = L.loss_old(pr, teacher, student, cfg.lam)
    else:
        parts["old"] = pr
    parts["pr"] = pr
    z_a, z_b = m.contrastive_head(h_a), m.contrastive_head(h_b)
    parts["cl"] = L.loss_cl(z_a, z_b, cfg.exclude_self_pairs)
    parts["guide"] = L.loss_guide(p_a, p_b, ctx.prior, cfg.eps, cfg.symmetrize_eq7)
    parts["novel"] = dk.add(parts["cl"], parts["guide"])
    if cfg.use_css:
        parts["css"] = L.loss_css(m.classifier.weight, h_a, h_b, ctx.novel_idx, cfg.exclude_self_pairs)
    if cfg.use_bap and alpha > 0:
        preds = (p_a.data + p_b.data).argmax(axis=1)
        nu = m.bap_head(ctx.known_mu) if ctx.known_mu is not None else None
        protos = L.project_prototypes(m.bap_head(h_a), m.bap_head(h_b), preds, ctx.novel_idx, nu)
        if protos.empty:
            state.skipped_bap_steps += 1
        else:
            parts["bap"] = L.loss_bap(protos, cfg.exclude_self_pairs)
    terms = {k: parts[k] for k in ("old", "novel", "css", "bap") if k in parts}
    parts["total"] = L.loss_total(terms, alpha)
    return parts


def begin_incremental(state: RunState, data: SessionData) -> StepContext:
    """Snapshot the teacher, grow the classifier and re-initialise both heads."""
    cfg, m = state.cfg, state.model
    t = state.session + 1
    init = stream(cfg.seed, STREAM_INIT, t)
    m.teacher = snapshot_teacher(m.encoder)
    n_known = m.classifier.n_classes
    m.classifier = extend_classifier(m.classifier, len(data.classes), _seed_from(init))
    fdim = m.encoder.feature_dim
    m.contrastive_head = ProjectionHead(fdim, fdim, purpose="contrastive", rng=init)
    m.bap_head = ProjectionHead(fdim, fdim, purpose="bap", rng=init)
    m.frozen_layers = _frozen(cfg, m.encoder)
    state.session = t
    state.class_groups.append(list(data.classes))
    c2i = state.class_to_index
    known = [(c2i[e.class_id], e) for e in state.store.entries()]
    known_mu = dk.constant(state.store.means()) if len(state.store) else None
    return StepContext(t, np.arange(n_known, n_known + len(data.classes)),
                       L.prior_distribution(n_known, len(data.classes)), known, known_mu)


def check_gradient_flow(state: RunState, ctx: StepContext) -> None:
    """Teacher parameters and stored prototypes must never accumulate gradient."""
    for p in state.model.teacher.parameters():
        if np.any(p.grad != 0):
            raise GradientFlowError("gradient reached the teacher snapshot")
    if ctx.known_mu is not None and np.any(ctx.known_mu.grad != 0):
        raise GradientFlowError("gradient reached the stored prototypes")


def run_incremental_session(state: RunState, data: SessionData, cfg: TrainConfig | None = None) -> RunState:
    cfg = cfg or state.cfg
    state.cfg = cfg
    if not isinstance(data.train, UnlabeledView):
        data = SessionData(data.session, data.classes, UnlabeledView(data.train.features), data.test)
    ctx = begin_incremental(state, data)
    t = ctx.t
    data_rng = stream(cfg.seed, STREAM_DATA, t)
    noise_rng = stream(cfg.seed, STREAM_NOISE, t)
    x_all = data.train.features
    params = state.model.trainable()
    enc_ids = {id(p) for p in state.model.encoder.parameters()}
    scales = [cfg.encoder_lr_scale if id(p) in enc_ids else 1.0 for p in params]
    opt = SGD(params, cfg.lr_inc, cfg.momentum, scales)
    for tau in range(cfg.epochs_inc):
        state.epoch = tau
        alpha = L.warmup_alpha(tau, cfg.omega, cfg.e)
        opt.lr = cosine_lr(cfg.lr_inc, tau, cfg.epochs_inc)
        for bi, b in enumerate(_batches(len(x_all), cfg.batch_size, data_rng)):
            opt.zero_grad()
            try:
                parts = incremental_losses(state, ctx, x_all[b], alpha, noise_rng)
            except FloatingPointError as err:
                raise NumericalAbort(f"session {t} epoch {tau} batch {bi}: {err}") from err
            dk.backward(parts["total"])
            if cfg.check_grad_flow:
                check_gradient_flow(state, ctx)
            opt.step()

    finish_incremental(state, data)
    return state


def finish_incremental(state: RunState, data: SessionData) -> None:
    """Freeze the permutation, harvest predicted-label prototypes and append the ledger row."""
    t = state.session
    test = data.test
    local = _novel_argmax(state, test.features, t)
    perm = fix_permutation(local, test.labels, data.classes, t)
    state.ledger.permutations[t] = perm
    state.index_to_class.extend(perm.mapping)

    x = data.train.features
    pred_ids = perm(_novel_argmax(state, x, t))
    entries, missing = compute_prototypes(features_of(state.model.encoder, x), pred_ids, data.classes, "predicted")
    if missing:
        log.warning("session %d: no samples predicted for classes %s; prototypes omitted", t, missing)
    state.store.update(entries)
    state.model.teacher = None
    state.epoch = 0
    state.tests.append(test)
    _record(state, evaluate_session(state, state.tests))


# ---------------------------------------------------------------- whole protocol


@dataclass
class RunResult:
    ledger: MetricsLedger
    state: RunState
    metrics: dict


def run_protocol(cfg: TrainConfig, sessions: list[SessionData], checkpoint_dir=None, stop_after: int | None = None,
                 resume=None, run_id: str = "run") -> RunResult:
    """Base session, then every discovery session in order.

    ``checkpoint_dir`` receives ``session_<t>.feac`` after each session;
    ``resume`` restarts from such a file; ``stop_after`` halts after that session.
    """
    if resume is not None:
        state = RunState.load(resume, cfg)
        state.tests = [s.test for s in sessions[:state.session + 1]]
    else:
        state = run_base_session(cfg, sessions[0])
        _checkpoint(state, checkpoint_dir)
    for data in sessions[state.session + 1:]:
        if stop_after is not None and state.session >= stop_after:
            break
        run_incremental_session(state, data, cfg)
        _checkpoint(state, checkpoint_dir)
    return RunResult(state.ledger, state, metrics_document(state.ledger, run_id))


def _checkpoint(state: RunState, checkpoint_dir) -> None:
    if checkpoint_dir is None:
        return
    d = Path(checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    state.save(d / f"session_{state.session}.feac")
