"""Correspondence, representation, grounding and classification metrics.

All functions take plain numpy arrays.  Correspondence matrices are ``K x K``
with rows indexing the querying eye's slots.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng

METRIC_NAMES = frozenset({
    "auc", "f1", "rho", "rho_random", "off_diag_max", "entropy_bits", "fisher_ratio",
    "spatial_variance", "jaccard", "miou", "dice", "miou_all_slots", "kmeans_miou",
    "kmeans_dice", "contralateral_mass", "slot_cosine", "loss",
})


@dataclass
class MetricRecord:
    name: str
    value: float
    seed: int
    config_hash: str
    auxiliary: list[float] | None = field(default=None)

    def __post_init__(self):
        if self.name not in METRIC_NAMES:
            raise ValueError(f"unregistered metric {self.name!r}")
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.name} is not finite: {self.value}")


# ---------------------------------------------------------------------------
# correspondence structure


def rho(c) -> float:
    """Diagonal concentration: trace(C) / sum(C)."""
    c = np.asarray(c, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("correspondence matrix must be non-negative")
    total = c.sum()
    if total <= 0:
        raise ValueError("correspondence matrix is all zero")
    return float(np.trace(c) / total)


def _row_normalize(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    sums = c.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("correspondence matrix has a zero row")
    return c / sums


def off_diag_row_max(c) -> float:
    """Mean over rows of the largest off-diagonal entry (rows normalized first)."""
    c = _row_normalize(c)
    k = c.shape[0]
    if k < 2:
        raise ValueError("off-diagonal maximum needs K >= 2")
    off = np.where(np.eye(k, dtype=bool), -np.inf, c)
    return float(off.max(axis=1).mean())


def attention_entropy(c) -> float:
    """Mean per-row Shannon entropy in bits, with 0 log 0 = 0."""
    p = _row_normalize(c)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(p), 0.0)
    return float(terms.sum(axis=1).mean())


# ---------------------------------------------------------------------------
# representation analysis


def fisher_ratio(features, labels, reg: float = 1e-6) -> float:
    """trace(S_W^-1 S_B) with S_W + reg * I."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    m, d = x.shape
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise ValueError("need at least two classes with two samples each")
    if d > m:
        raise ValueError(f"feature dimension {d} exceeds sample count {m}")
    mu = x.mean(axis=0)
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    for c, n in zip(classes, counts):
        xc = x[y == c]
        mc = xc.mean(axis=0)
        dev = xc - mc
        s_w += dev.T @ dev
        diff = (mc - mu)[:, None]
        s_b += n * (diff @ diff.T)
    s_w += reg * np.eye(d)
    try:
        return float(np.trace(np.linalg.solve(s_w, s_b)))
    except np.linalg.LinAlgError as exc:
        raise ValueError("within-class scatter is singular") from exc


def single_label_subset(labels) -> tuple[np.ndarray, np.ndarray]:
    """Indices of rows with exactly one positive class, and that class."""
    y = np.asarray(labels)
    keep = np.flatnonzero(y.sum(axis=1) == 1)
    return keep, y[keep].argmax(axis=1)


def spatial_variance(attn, grid_side: int) -> np.ndarray:
    """Per-slot var_x + var_y of the slot's attention over the patch grid."""
    a = np.asarray(attn, dtype=np.float64)
    k, n = a.shape
    if n != grid_side * grid_side:
        raise ValueError(f"{n} tokens do not form a {grid_side}x{grid_side} grid")
    p = a / a.sum(axis=1, keepdims=True)
    rows, cols = np.divmod(np.arange(n), grid_side)
    out = np.empty(k)
    for i in range(k):
        mx, my = p[i] @ cols, p[i] @ rows
        out[i] = p[i] @ (cols - mx) ** 2 + p[i] @ (rows - my) ** 2
    return out


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def jaccard_stability(assignments, slot: int) -> float:
    """Mean pairwise Jaccard of the token sets argmax-assigned to ``slot``."""
    m = (np.asarray(assignments) == slot).astype(np.float64)
    if m.ndim != 2 or len(m) < 2:
        raise ValueError("need at least two samples")
    inter = m @ m.T
    sizes = m.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        jac = np.where(union > 0, inter / union, 1.0)
    iu = np.triu_indices(len(m), k=1)
    return float(jac[iu].mean())


def miou_dice(pred_mask, gt_mask) -> tuple[float, float]:
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    inter = np.count_nonzero(p & g)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0, 1.0
    return inter / union, 2 * inter / (np.count_nonzero(p) + np.count_nonzero(g))


def slot_cosine_similarity(slots) -> float:
    """Mean pairwise cosine similarity between distinct slot rows (batched ok)."""
    s = np.asarray(slots, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    k = s.shape[1]
    unit = s / np.maximum(np.linalg.norm(s, axis=-1, keepdims=True), 1e-12)
    sim = unit @ np.swapaxes(unit, -1, -2)
    off = ~np.eye(k, dtype=bool)
    return float(sim[:, off].mean())


def contralateral_mass(cross_row, attn_other, center, grid_side: int, radius: int = 1) -> float:
    """Share of a slot's cross-eye attention landing near ``center`` in the other eye.

    The slot-to-slot row is composed with the other eye's slot-to-patch
    attention (rows normalized over patches); the result is summed over the
    ``(2 radius + 1)^2`` patch window around ``center`` = (column, row).
    """
    row = np.asarray(cross_row, dtype=np.float64)
    a = np.asarray(attn_other, dtype=np.float64)
    a = a / a.sum(axis=1, keepdims=True)
    over_patches = (row / row.sum()) @ a
    cx, cy = int(round(center[0])), int(round(center[1]))
    rows, cols = np.divmod(np.arange(grid_side * grid_side), grid_side)
    window = (np.abs(cols - cx) <= radius) & (np.abs(rows - cy) <= radius)
    return float(over_patches[window].sum())


# ---------------------------------------------------------------------------
# classification


def _auc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    # Mann-Whitney U via midranks: ties contribute 1/2
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    i = 0
    while i < len(allv):
        j = i
        while j + 1 < len(allv) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))


def per_class_auc(scores, labels) -> list[float | None]:
    """ROC AUC per class; ``None`` where a class lacks positives or negatives."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    out: list[float | None] = []
    for c in range(s.shape[1]):
        n_pos = int(y[:, c].sum())
        if n_pos == 0 or n_pos == len(y):
            out.append(None)
        else:
            out.append(_auc_binary(s[:, c], y[:, c]))
    return out


def macro_auc(scores, labels) -> float:
    vals = [v for v in per_class_auc(scores, labels) if v is not None]
    if not vals:
        raise ValueError("no class has both positive and negative samples")
    return float(np.mean(vals))


def macro_f1(scores, labels, threshold: float = 0.5) -> float:
    """Macro F1 of ``sigmoid(scores) >= threshold``; per-class 0/0 counts as 0."""
    z = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if z.ndim == 1:
        z, y = z[:, None], y[:, None]
    pred = 0.5 * (np.tanh(0.5 * z) + 1.0) >= threshold
    f1s = []
    for c in range(z.shape[1]):
        tp = np.count_nonzero(pred[:, c] & y[:, c])
        fp = np.count_nonzero(pred[:, c] & ~y[:, c])
        fn = np.count_nonzero(~pred[:, c] & y[:, c])
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


# ---------------------------------------------------------------------------
# k-means grounding baseline


def _lloyd(x: np.ndarray, k: int, rng: Rng, iters: int) -> tuple[np.ndarray, float]:
    n = len(x)
    # k-means++ seeding
    centers = [x[int(rng.integers(0, n))]]
    for _ in range(1, k):
        d2 = ((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1).min(axis=1)
        if d2.sum() <= 0:
            centers.append(x[int(rng.integers(0, n))])
        else:
            centers.append(x[int(rng.gen.choice(n, p=d2 / d2.sum()))])
    c = np.array(centers, dtype=np.float64)
    labels = np.zeros(n, dtype=int)
    for _ in range(iters):
        d2 = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        new_c = c.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_c[j] = x[members].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its centre
                far = int(d2[np.arange(n), labels].argmax())
                new_c[j] = x[far]
                labels[far] = j
        if np.allclose(new_c, c):
            c = new_c
            break
        c = new_c
    d2 = ((x[:, None, :] - c[None]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    return labels, inertia


def kmeans(features, k: int, rng: Rng, iters: int = 50, restarts: int = 5):
    """Lloyd's algorithm, best of ``restarts`` by inertia. Returns ``(labels, inertia)``."""
    x = np.asarray(features, dtype=np.float64)
    if k > len(x):
        raise ValueError(f"k={k} exceeds the number of points {len(x)}")
    best = None
    for r in range(restarts):
        labels, inertia = _lloyd(x, k, rng.child(r), iters)
        if best is None or inertia < best[1]:
            best = (labels, inertia)
    return best


def kmeans_baseline(features, k: int, rng: Rng, iters: int = 50, restarts: int = 5) -> np.ndarray:
    return kmeans(features, k, rng, iters, restarts)[0]


def best_cluster_overlap(assignment, gt_mask, k: int) -> tuple[float, float, int]:
    """(iou, dice, cluster) of the cluster that best overlaps ``gt_mask``."""
    best = (-1.0, 0.0, 0)
    for j in range(k):
        iou, dice = miou_dice(np.asarray(assignment) == j, gt_mask)
        if iou > best[0]:
            best = (iou, dice, j)
    return best
