"""Hungarian assignment, frozen per-session permutations and continual metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian_assign(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect assignment, ties broken towards the lexicographically smallest permutation.

    Returns ``(perm, total)`` with row ``i`` assigned to column ``perm[i]``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"hungarian_assign needs a square matrix, got shape {cost.shape}")
    n = cost.shape[0]
    if n == 0:
        raise ValueError("hungarian_assign needs n >= 1")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix entries must be finite")
    best = _optimal_cost(cost)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max())) * n
    rows = list(range(n))
    cols = list(range(n))
    perm = np.empty(n, dtype=np.int64)
    spent = 0.0
    # Greedily fix each row to the smallest column that still admits an optimum.
    for r in range(n):
        rest_rows = rows[r + 1:]
        for c in sorted(cols):
            rest_cols = [x for x in cols if x != c]
            sub = _optimal_cost(cost[np.ix_(rest_rows, rest_cols)]) if rest_rows else 0.0
            if spent + cost[r, c] + sub <= best + tol:
                perm[r] = c
                spent += cost[r, c]
                cols.remove(c)
                break
    return perm, float(cost[np.arange(n), perm].sum())


@dataclass(frozen=True)
class AssignmentPermutation:
    """Frozen mapping from local cluster index to ground-truth class id for one session."""

    session: int
    mapping: tuple[int, ...]

    def __call__(self, cluster_idx):
        return np.asarray(self.mapping)[np.asarray(cluster_idx)]


def fix_permutation(preds, truths, classes, session: int) -> AssignmentPermutation:
    """Match local cluster predictions (0..K-1) to the ground-truth ids in ``classes``."""
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    classes = [int(c) for c in classes]
    k = len(classes)
    if preds.size and (preds.min() < 0 or preds.max() >= k):
        bad = preds[(preds < 0) | (preds >= k)][0]
        raise ValueError(f"prediction index {bad} lies outside the novel block [0, {k})")
    pos = {c: i for i, c in enumerate(classes)}
    overlap = np.zeros((k, k))
    for p, t in zip(preds, truths):
        if int(t) not in pos:
            raise ValueError(f"truth label {t} is not in the session's class set")
        overlap[p, pos[int(t)]] += 1
    perm, _ = hungarian_assign(-overlap)
    return AssignmentPermutation(session, tuple(classes[j] for j in perm))


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if truth.size == 0:
        return float("nan")
    return 100.0 * float(np.mean(pred == truth))


class LedgerError(ValueError):
    pass


@dataclass
class MetricsLedger:
    """Accuracy matrix a[t][j] (percent) plus the frozen permutations and per-session overall accuracy."""

    rows: list[list[float]] = field(default_factory=list)
    overall: list[float] = field(default_factory=list)
    permutations: dict[int, AssignmentPermutation] = field(default_factory=dict)

    def append(self, row, overall: float) -> None:
        row = [float(x) for x in row]
        if len(row) != len(self.rows) + 1:
            raise LedgerError(f"ledger row {len(self.rows)} needs {len(self.rows) + 1} entries, got {len(row)}")
        if any(not (0.0 <= x <= 100.0) for x in row):
            raise LedgerError("accuracies must lie in [0, 100]")
        self.rows.append(row)
        self.overall.append(float(overall))

    @property
    def n_sessions(self) -> int:
        return len(self.rows)

    def a(self, t: int, j: int) -> float:
        if j > t:
            raise LedgerError(f"a[{t}][{j}] is undefined (j > t)")
        return self.rows[t][j]

    def matrix(self) -> np.ndarray:
        n = self.n_sessions
        m = np.full((n, n), np.nan)
        for t, row in enumerate(self.rows):
            m[t, :len(row)] = row
        return m

    @classmethod
    def from_matrix(cls, m, overall=None) -> MetricsLedger:
        m = np.asarray(m, dtype=np.float64)
        led = cls()
        for t in range(m.shape[0]):
            led.rows.append([float(x) for x in m[t, :t + 1]])
        led.overall = [float(x) for x in overall] if overall is not None else [float("nan")] * m.shape[0]
        return led


def avg_forgetting(ledger: MetricsLedger, t: int) -> float:
    """Mean drop from the best earlier accuracy on each previous class group."""
    if t < 1:
        raise LedgerError("forgetting is defined for t >= 1")
    if ledger.n_sessions <= t:
        raise LedgerError(f"ledger has {ledger.n_sessions} rows, need row {t}")
    total = 0.0
    for j in range(t):
        best = max(ledger.a(l, j) for l in range(j, t))
        total += best - ledger.a(t, j)
    return total / t


def avg_discovery(ledger: MetricsLedger, t: int) -> float:
    if t < 1:
        raise LedgerError("discovery accuracy is defined for t >= 1")
    if ledger.n_sessions <= t:
        raise LedgerError(f"ledger has {ledger.n_sessions} rows, need row {t}")
    return sum(ledger.a(t, j) for j in range(1, t + 1)) / t


def avg_accuracy(ledger: MetricsLedger, T: int | None = None) -> float:
    T = ledger.n_sessions - 1 if T is None else T
    if ledger.n_sessions < T + 1 or len(ledger.overall) < T + 1 or any(np.isnan(ledger.overall[:T + 1])):
        raise LedgerError(f"average accuracy needs overall accuracies for sessions 0..{T}")
    return float(sum(ledger.overall[:T + 1]) / (T + 1))


@dataclass
class SessionEvaluation:
    row: list[float]
    overall: float
    confusion: np.ndarray
    labels: list[int]


def remap_predictions(raw_pred, index_to_class) -> np.ndarray:
    """Translate classifier indices into ground-truth class ids."""
    return np.asarray(index_to_class, dtype=np.int64)[np.asarray(raw_pred, dtype=np.int64)]


def evaluate_predictions(pred_ids, truths, class_groups) -> SessionEvaluation:
    """Per-group accuracy, micro overall accuracy and confusion matrix.

    ``pred_ids`` are already in ground-truth label space; ``class_groups``
    lists C^0..C^t in order.
    """
    pred_ids = np.asarray(pred_ids, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    row = []
    for group in class_groups:
        mask = np.isin(truths, list(group))
        row.append(accuracy(pred_ids[mask], truths[mask]))
    labels = [int(c) for g in class_groups for c in g]
    pos = {c: i for i, c in enumerate(labels)}
    conf = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in zip(pred_ids, truths):
        if int(p) in pos:
            conf[pos[int(t)], pos[int(p)]] += 1
    return SessionEvaluation(row, accuracy(pred_ids, truths), conf, labels)


def metrics_document(ledger: MetricsLedger, run_id: str = "run") -> dict:
    T = ledger.n_sessions - 1
    doc = {
        "run_id": run_id,
        "sessions": ledger.n_sessions,
        "a_matrix": [list(r) for r in ledger.rows],
        "overall_accuracy": list(ledger.overall),
        "forgetting": {str(t): avg_forgetting(ledger, t) for t in range(1, T + 1)},
        "discovery": {str(t): avg_discovery(ledger, t) for t in range(1, T + 1)},
        "F_T": avg_forgetting(ledger, T) if T >= 1 else None,
        "D_T": avg_discovery(ledger, T) if T >= 1 else None,
        "average_accuracy": avg_accuracy(ledger, T),
        "permutations": {str(t): list(p.mapping) for t, p in sorted(ledger.permutations.items())},
    }
    return doc


def dump_metrics(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def confusion_csv(conf: np.ndarray, labels) -> str:
    lines = ["," + ",".join(str(c) for c in labels)]
    for c, row in zip(labels, conf):
        lines.append(f"{c}," + ",".join(str(int(x)) for x in row))
    return "\n".join(lines) + "\n"


def evaluate_log(log: dict) -> tuple[MetricsLedger, list[SessionEvaluation]]:
    """Recompute the ledger from a prediction log without a model.

    The log holds ``class_groups`` (C^0..C^T) and one record per session with
    raw classifier ``predictions``, ``truths`` and, for t >= 1,
    ``novel_predictions``: local cluster indices for the C^t test samples.
    """
    groups = [list(map(int, g)) for g in log["class_groups"]]
    records = sorted(log["records"], key=lambda r: r["session"])
    ledger = MetricsLedger()
    index_to_class = list(groups[0])
    evals = []
    for rec in records:
        t = int(rec["session"])
        truths = np.asarray(rec["truths"], dtype=np.int64)
        if t >= 1:
            novel_mask = np.isin(truths, groups[t])
            perm = fix_permutation(rec["novel_predictions"], truths[novel_mask], groups[t], t)
            ledger.permutations[t] = perm
            index_to_class.extend(perm.mapping)
        raw = np.asarray(rec["predictions"], dtype=np.int64)
        if raw.size and (raw.min() < 0 or raw.max() >= len(index_to_class)):
            raise ValueError(f"session {t}: prediction index {int(raw.max())} exceeds "
                             f"the {len(index_to_class)} classifier rows")
        pred_ids = remap_predictions(raw, index_to_class)
        ev = evaluate_predictions(pred_ids, truths, groups[:t + 1])
        ledger.append(ev.row, ev.overall)
        evals.append(ev)
    return ledger, evals
