"""Loss terms of the FEA objective, written over diffkernel nodes.

All functions take and return ``Node`` objects so they can be differentiated;
plain arrays are accepted wherever an input is treated as a constant.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffkernel as dk
from .diffkernel import Node
from .protomem import PrototypeEntry, sample_pseudo_features

SELF_MASK = -1e30


def _node(x) -> Node:
    return x if isinstance(x, Node) else dk.constant(x)


def cross_entropy(target, predicted) -> Node:
    """Mean over rows of -sum_j target_j * log(predicted_j), log floored at 1e-12."""
    t, p = _node(target), _node(predicted)
    if t.shape != p.shape:
        raise dk.ShapeError(f"cross_entropy: target {t.shape} vs predicted {p.shape}")
    per_row = dk.sum(dk.mul(t, dk.clamped_log(p)), axis=1)
    return dk.scale(dk.mean(per_row), -1.0)


loss_ce = cross_entropy


# ---------------------------------------------------------------- old knowledge


def loss_pr(prototypes: Sequence[tuple[int, PrototypeEntry]], clf, n_p: int, seed) -> Node:
    """Pseudo-rehearsal cross-entropy on Gaussian samples around stored prototypes.

    ``prototypes`` pairs each entry with its classifier row index. Pseudo
    features are constants, so only the classifier receives gradient.
    """
    if not prototypes:
        warnings.warn("loss_pr called with no prototypes; returning 0", RuntimeWarning, stacklevel=2)
        return dk.constant(0.0)
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    feats = []
    targets = np.zeros((len(prototypes) * n_p, clf.n_classes))
    for i, (idx, entry) in enumerate(prototypes):
        feats.append(sample_pseudo_features(entry, n_p, rng))
        targets[i * n_p:(i + 1) * n_p, idx] = 1.0
    logits = clf(dk.constant(np.vstack(feats)))
    return cross_entropy(targets, dk.softmax(logits))


def loss_fd(teacher_features, student_features) -> Node:
    """Mean squared difference of row-normalised teacher and student features."""
    t, s = _node(teacher_features), _node(student_features)
    if t.shape != s.shape:
        raise dk.ShapeError(f"loss_fd: teacher {t.shape} vs student {s.shape}")
    diff = dk.sub(dk.l2_normalize(t), dk.l2_normalize(s))
    return dk.mean(dk.mul(diff, diff))


def loss_old(pr: Node, teacher_features, student_features, lam: float) -> Node:
    if lam == 0:
        return pr
    return dk.add(pr, dk.scale(loss_fd(teacher_features, student_features), lam))


# ---------------------------------------------------------------- novel knowledge


def paired_contrastive(a, b, negatives=None, exclude_self: bool = False) -> Node:
    """Shared form of the contrastive, CSS and BAP losses.

    For each row i: -log exp(a_i.b_i) / (sum_c exp(a_i.n_c) + sum_j [exp(a_i.a_j) + exp(a_i.b_j)])
    on row-normalised inputs, averaged over rows. ``negatives`` rows form the
    optional first block of the denominator.
    """
    a, b = _node(a), _node(b)
    if a.shape[0] == 0:
        raise ValueError("contrastive loss needs at least one row")
    if a.shape != b.shape:
        raise dk.ShapeError(f"paired views differ in shape: {a.shape} vs {b.shape}")
    an, bn = dk.l2_normalize(a), dk.l2_normalize(b)
    s_ab = dk.matmul(an, dk.transpose(bn))
    s_aa = dk.matmul(an, dk.transpose(an))
    if exclude_self:
        s_aa = dk.add(s_aa, dk.constant(np.eye(a.shape[0]) * SELF_MASK))
    pos = dk.sum(dk.mul(s_ab, dk.constant(np.eye(a.shape[0]))), axis=1)
    blocks = [s_aa, s_ab]
    if negatives is not None and _node(negatives).shape[0] > 0:
        blocks.insert(0, dk.matmul(an, dk.transpose(dk.l2_normalize(_node(negatives)))))
    lse = dk.logsumexp(dk.concat(blocks, axis=1))
    return dk.mean(dk.sub(lse, pos))


def loss_cl(z_a, z_b, exclude_self: bool = False) -> Node:
    return paired_contrastive(z_a, z_b, exclude_self=exclude_self)


def prior_distribution(n_known: int, n_novel: int) -> np.ndarray:
    """Zero mass on known classes, uniform over the current novel block."""
    if n_novel < 1:
        raise ValueError("prior needs at least one novel class")
    p = np.zeros((1, n_known + n_novel))
    p[0, n_known:] = 1.0 / n_novel
    return p


def guide_term(p_a, p_b, prior: np.ndarray) -> Node:
    """KL(prior || batch-mean prediction) with 0 log 0 = 0."""
    p_a, p_b = _node(p_a), _node(p_b)
    prior = np.asarray(prior, dtype=np.float64).reshape(1, -1)
    if prior.shape[1] != p_a.shape[1] or p_a.shape != p_b.shape:
        raise dk.ShapeError(f"guide_term: prior length {prior.shape[1]} vs predictions {p_a.shape}/{p_b.shape}")
    p_bar = dk.scale(dk.mean(dk.add(p_a, p_b), axis=0), 0.5)
    log_prior = np.where(prior > 0, np.log(np.where(prior > 0, prior, 1.0)), 0.0)
    entropy_part = float((prior * log_prior).sum())
    cross = dk.sum(dk.mul(dk.constant(prior), dk.clamped_log(p_bar)))
    return dk.sub(dk.constant(entropy_part), cross)


def loss_guide(p_a, p_b, prior, eps: float, symmetrize: bool = False) -> Node:
    """Cross-view cross-entropy with p_a in the target slot, plus eps * guide_term."""
    ce = cross_entropy(p_a, p_b)
    if symmetrize:
        ce = dk.scale(dk.add(ce, cross_entropy(p_b, p_a)), 0.5)
    if eps == 0:
        return ce
    return dk.add(ce, dk.scale(guide_term(p_a, p_b, prior), eps))


def loss_guide_novel(p_a, p_b, z_a, z_b, prior, eps: float, symmetrize: bool = False,
                     exclude_self: bool = False) -> Node:
    return dk.add(loss_cl(z_a, z_b, exclude_self), loss_guide(p_a, p_b, prior, eps, symmetrize))


# ---------------------------------------------------------------- CSS


def similarity_profiles(weight, h_a, h_b, novel_idx) -> tuple[Node, Node]:
    """Cosine similarity of each novel centroid against every sample of each view.

    Returns two (n_novel, batch) nodes; row k is s_k for that view.
    """
    w = dk.take_rows(_node(weight), np.asarray(novel_idx))
    return dk.cosine_matrix(w, _node(h_a)), dk.cosine_matrix(w, _node(h_b))


def loss_css(weight, h_a, h_b, novel_idx, exclude_self: bool = False) -> Node:
    novel_idx = np.asarray(novel_idx)
    if novel_idx.size == 0:
        raise ValueError("loss_css needs a non-empty novel class range")
    if _node(h_a).shape[0] == 0:
        raise ValueError("loss_css needs a non-empty batch")
    s_a, s_b = similarity_profiles(weight, h_a, h_b, novel_idx)
    for tag, s in (("a", s_a), ("b", s_b)):
        zero = np.flatnonzero(np.linalg.norm(s.data, axis=1) == 0)
        if zero.size:
            raise ValueError(f"similarity profile for view {tag} of novel class row {int(zero[0])} has zero norm")
    return paired_contrastive(s_a, s_b, exclude_self=exclude_self)


# ---------------------------------------------------------------- BAP


@dataclass
class ProjectedPrototypeSet:
    rho_a: Node | None
    rho_b: Node | None
    nu: Node | None
    present: np.ndarray  # classifier indices of novel classes with >= 1 predicted sample

    @property
    def empty(self) -> bool:
        return self.present.size == 0


def project_prototypes(g_a, g_b, predictions, novel_idx, nu=None) -> ProjectedPrototypeSet:
    """Average projected features per predicted novel class.

    ``g_a``/``g_b`` are projected features of the two views, ``predictions``
    holds one classifier index per sample, ``nu`` the projected known prototypes.
    """
    predictions = np.asarray(predictions)
    present = np.array([k for k in novel_idx if np.any(predictions == k)], dtype=np.int64)
    if present.size == 0:
        return ProjectedPrototypeSet(None, None, nu, present)
    assign = (predictions[None, :] == present[:, None]).astype(np.float64)
    assign /= assign.sum(axis=1, keepdims=True)
    m = dk.constant(assign)
    return ProjectedPrototypeSet(dk.matmul(m, _node(g_a)), dk.matmul(m, _node(g_b)),
                                 None if nu is None else _node(nu), present)


def loss_bap(protos: ProjectedPrototypeSet, exclude_self: bool = False) -> Node:
    """Boundary-aware prototype loss; a constant 0 when no novel class is present."""
    if protos.empty:
        return dk.constant(0.0)
    return paired_contrastive(protos.rho_a, protos.rho_b, negatives=protos.nu, exclude_self=exclude_self)


# ---------------------------------------------------------------- total


def warmup_alpha(tau: float, omega: float, e: float) -> float:
    if e <= 0:
        raise ValueError("warm-up inflection e must be >= 1")
    if tau < 0:
        raise ValueError("epoch index must be non-negative")
    return omega * min(tau / e, 1.0)


def loss_total(parts: Mapping[str, Node], alpha: float = 0.0, css_weight: float = 1.0,
               bap_weight: float = 1.0) -> Node:
    """L_old + L_novel + css_weight * L_css + alpha * bap_weight * L_bap.

    Missing or zero-weighted terms are left out of the graph entirely.
    """
    for name, v in parts.items():
        if not math.isfinite(_node(v).item()):
            raise FloatingPointError(f"loss term {name!r} is not finite: {_node(v).item()}")
    total = dk.add(_node(parts.get("old", 0.0)), _node(parts.get("novel", 0.0)))
    if css_weight and "css" in parts:
        term = parts["css"] if css_weight == 1 else dk.scale(parts["css"], css_weight)
        total = dk.add(total, term)
    w = alpha * bap_weight
    if w and "bap" in parts:
        total = dk.add(total, dk.scale(parts["bap"], w))
    return total
