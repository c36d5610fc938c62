"""Finite-difference checks for every loss term on small random instances.

Only relu-free leaves are perturbed (classifier weights, features, projected
vectors), so central differences never straddle a kink.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffkernel as dk
from . import losses as L
from .diffkernel import GradCheckReport, Node
from .model import CosineClassifier
from .protomem import PrototypeEntry

LOSS_NAMES = ("L_ce", "L_pr", "L_fd", "L_old", "L_cl", "D_g", "L_guide", "L_CSS", "L_BAP", "L_FEA")

Builder = Callable[..., Node]


def _clf(weight: Node, scale: float) -> CosineClassifier:
    clf = CosineClassifier(weight.data, scale)
    clf.weight = weight
    return clf


def _dims(rng):
    n = int(rng.integers(2, 9))
    d = int(rng.integers(2, 17))
    n_known = int(rng.integers(1, 4))
    n_novel = int(rng.integers(2, 4))
    return n, d, n_known, n_novel


def _entries(rng, n_known, d):
    return [(i, PrototypeEntry(100 + i, rng.uniform(-2, 2, d), rng.uniform(0.05, 1.0, d), 10))
            for i in range(n_known)]


def _soft(rng, n, k):
    t = rng.random((n, k)) + 0.05
    return t / t.sum(axis=1, keepdims=True)


def instance(name: str, rng: np.random.Generator) -> tuple[Builder, list[np.ndarray]]:
    """Random instance of loss ``name``: a builder taking leaf nodes and the leaf values."""
    n, d, n_known, n_novel = _dims(rng)
    k = n_known + n_novel
    u = lambda *shape: rng.uniform(-2, 2, shape)  # noqa: E731
    scale = float(rng.uniform(1, 10))
    seed = int(rng.integers(2**31))
    novel_idx = np.arange(n_known, k)
    prior = L.prior_distribution(n_known, n_novel)
    eps = float(rng.uniform(0.05, 1.0))

    if name == "L_ce":
        target = _soft(rng, n, k)
        return (lambda z: L.cross_entropy(target, dk.softmax(z))), [u(n, k)]
    if name == "L_pr":
        protos = _entries(rng, n_known, d)
        return (lambda w: L.loss_pr(protos, _clf(w, scale), 3, seed)), [u(k, d)]
    if name == "L_fd":
        teacher = u(n, d)
        return (lambda s: L.loss_fd(teacher, s)), [u(n, d)]
    if name == "L_old":
        protos = _entries(rng, n_known, d)
        teacher = u(n, d)
        lam = float(rng.uniform(0.01, 1.0))
        return (lambda w, s: L.loss_old(L.loss_pr(protos, _clf(w, scale), 3, seed), teacher, s, lam)), \
            [u(k, d), u(n, d)]
    if name == "L_cl":
        return (lambda a, b: L.loss_cl(a, b)), [u(n, d), u(n, d)]
    if name == "D_g":
        return (lambda a, b: L.guide_term(dk.softmax(a), dk.softmax(b), prior)), [u(n, k), u(n, k)]
    if name == "L_guide":
        return (lambda a, b: L.loss_guide(dk.softmax(a), dk.softmax(b), prior, eps)), [u(n, k), u(n, k)]
    if name == "L_CSS":
        return (lambda w, a, b: L.loss_css(w, a, b, novel_idx)), [u(k, d), u(n, d), u(n, d)]
    if name == "L_BAP":
        preds = novel_idx[rng.integers(0, n_novel, n)]
        preds[:n_novel] = novel_idx[:min(n, n_novel)]

        def bap(ga, gb, nu):
            return L.loss_bap(L.project_prototypes(ga, gb, preds, novel_idx, nu))
        return bap, [u(n, d), u(n, d), u(n_known, d)]
    if name == "L_FEA":
        protos = _entries(rng, n_known, d)
        teacher = u(n, d)
        alpha = float(rng.uniform(0, 2))
        preds = novel_idx[rng.integers(0, n_novel, n)]

        def total(w, ha, hb, s, za, zb, ga, gb):
            clf = _clf(w, scale)
            pa, pb = dk.softmax(clf(ha)), dk.softmax(clf(hb))
            parts = {
                "old": L.loss_old(L.loss_pr(protos, clf, 3, seed), teacher, s, 0.01),
                "novel": L.loss_guide_novel(pa, pb, za, zb, prior, eps),
                "css": L.loss_css(w, ha, hb, novel_idx),
                "bap": L.loss_bap(L.project_prototypes(ga, gb, preds, novel_idx)),
            }
            return L.loss_total(parts, alpha)
        return total, [u(k, d), u(n, d), u(n, d), u(n, d), u(n, d), u(n, d), u(n, d), u(n, d)]
    raise KeyError(f"unknown loss {name!r}")


def check_loss(name: str, n_instances: int = 20, tol: float = 1e-3, step: float = 1e-4,
               abs_floor: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Worst relative and absolute error over ``n_instances`` random instances."""
    rng = np.random.default_rng([seed, LOSS_NAMES.index(name) if name in LOSS_NAMES else 99])
    worst_rel = worst_abs = 0.0
    bad = None
    for _ in range(n_instances):
        f, point = instance(name, rng)
        rep = dk.finite_diff_check(f, point, step=step, tol=tol, abs_floor=abs_floor, name=name)
        worst_rel = max(worst_rel, rep.max_rel_error)
        worst_abs = max(worst_abs, rep.max_abs_error)
        if not rep.passed and bad is None:
            bad = rep.bad_coordinate
    passed = worst_rel <= tol or worst_abs <= abs_floor
    return GradCheckReport(name, worst_rel, worst_abs, passed, tol, abs_floor, bad)


def run_suite(n_instances: int = 20, tol: float = 1e-3, step: float = 1e-4, abs_floor: float = 1e-6,
              seed: int = 0, names=LOSS_NAMES) -> list[GradCheckReport]:
    return [check_loss(nm, n_instances, tol, step, abs_floor, seed) for nm in names]


def format_table(reports: list[GradCheckReport]) -> str:
    head = f"{'loss':<10s} {'max_rel':>11s} {'max_abs':>11s}  status"
    rows = [f"{r.op_name:<10s} {r.max_rel_error:11.3e} {r.max_abs_error:11.3e}  {'PASS' if r.passed else 'FAIL'}"
            for r in reports]
    return "\n".join([head, *rows])
