"""Unsupervised structure evaluation: part matching, clustering, saliency.

Predicted structures are compared against reference label grids at patch
resolution.  Parts are matched one-to-one with a maximum-score assignment
before IoU averaging; saliency comes from a normalized-cut bipartition of
a token affinity graph, optionally sharpened by a dependency mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, UsageError


@dataclass
class LabelGrid:
    """Integer labels on a height x width patch grid; -1 marks ignore."""

    width: int
    height: int
    labels: np.ndarray

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "LabelGrid":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ShapeError("label grid must be 2-D")
        g = cls(width=labels.shape[1], height=labels.shape[0], labels=labels)
        g.validate()
        return g

    def validate(self) -> None:
        if self.labels.shape != (self.height, self.width):
            raise ShapeError(
                f"labels shaped {self.labels.shape}, grid says "
                f"({self.height}, {self.width})"
            )
        vals = np.unique(self.labels)
        vals = vals[vals >= 0]
        if vals.size and (self.labels.min() < -1
                          or not np.array_equal(vals, np.arange(vals.size))):
            raise ShapeError("labels must be -1 or dense 0..m-1")

    def part_ids(self) -> np.ndarray:
        vals = np.unique(self.labels)
        return vals[vals >= 0]


@dataclass
class MetricReport:
    """Fractional quality scores; a None field means not applicable."""

    miou: float | None = None
    macc: float | None = None
    max_f_beta: float | None = None
    iou: float | None = None
    acc: float | None = None
    matching: list[tuple[int, int]] = field(default_factory=list)

    def validate(self) -> None:
        for name in ("miou", "macc", "max_f_beta", "iou", "acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0 + 1e-9:
                raise UsageError(f"{name} = {v} outside [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "miou": self.miou,
            "macc": self.macc,
            "max_f_beta": self.max_f_beta,
            "iou": self.iou,
            "acc": self.acc,
            "matching": [[int(p), int(g)] for p, g in self.matching],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def _square_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect assignment on a square matrix; row -> column.

    Potentials-based augmenting-path construction, O(n^3).
    """
    n = cost.shape[0]
    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # column -> row, 1-based rows
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = inf, -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    out = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        out[match[j] - 1] = j - 1
    return out


def _best_total(scores: np.ndarray) -> float:
    """Maximum achievable total score with one-to-one real pairs."""
    p, g = scores.shape
    if p == 0 or g == 0:
        return 0.0
    n = max(p, g)
    padded = np.zeros((n, n))
    padded[:p, :g] = scores
    rows = _square_assignment(-padded)
    return float(sum(
        scores[i, rows[i]] for i in range(p) if rows[i] < g
    ))


def hungarian_match(scores: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one pairing of rows to columns maximizing the total score.

    Returns min(P, G) pairs.  Among equally good assignments the
    lexicographically smallest pair sequence wins, fixed greedily by
    re-solving the reduced problem for each candidate pair.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError("score matrix must be 2-D")
    if not np.all(np.isfinite(scores)):
        raise NumericError("score matrix contains non-finite entries")
    p, g = scores.shape
    if p == 0 or g == 0:
        return []
    target = _best_total(scores)
    tol = 1e-9 * max(1.0, abs(target))
    pairs: list[tuple[int, int]] = []
    rows = list(range(p))
    cols = list(range(g))
    fixed = 0.0
    for i in list(rows):
        if len(pairs) == min(p, g):
            break
        chosen = None
        for j in cols:
            rest = scores[np.ix_([r for r in rows if r != i],
                                 [c for c in cols if c != j])]
            if abs(fixed + scores[i, j] + _best_total(rest) - target) <= tol:
                chosen = j
                break
        if chosen is None:
            # row i stays unmatched; only possible when rows outnumber columns
            rest = scores[np.ix_([r for r in rows if r != i], cols)]
            if abs(fixed + _best_total(rest) - target) > tol:
                raise NumericError("assignment fixing lost the optimum")
            rows.remove(i)
            continue
        pairs.append((i, chosen))
        fixed += scores[i, chosen]
        rows.remove(i)
        cols.remove(chosen)
    return pairs


def part_metrics(pred: LabelGrid, gt: LabelGrid) -> MetricReport:
    """Match parts by IoU, then average IoU and per-part accuracy over
    the reference parts; unmatched reference parts score zero."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ShapeError("prediction and reference grids differ in size")
    pv = pred.labels.ravel()
    gv = gt.labels.ravel()
    valid = (pv >= 0) & (gv >= 0)
    pv, gv = pv[valid], gv[valid]
    gt_ids = np.unique(gv)
    pred_ids = np.unique(pv)
    if gt_ids.size == 0:
        return MetricReport()
    scores = np.zeros((pred_ids.size, gt_ids.size))
    for a, pid in enumerate(pred_ids):
        pm = pv == pid
        for b, gid in enumerate(gt_ids):
            gm = gv == gid
            inter = np.count_nonzero(pm & gm)
            union = np.count_nonzero(pm | gm)
            scores[a, b] = inter / union if union else 0.0
    raw = hungarian_match(scores)
    matching = [
        (int(pred_ids[a]), int(gt_ids[b])) for a, b in raw if scores[a, b] > 0.0
    ]
    matched = {gid: pid for pid, gid in matching}
    iou_sum = 0.0
    acc_sum = 0.0
    for gid in gt_ids:
        gm = gv == gid
        if int(gid) in matched:
            pm = pv == matched[int(gid)]
            inter = np.count_nonzero(pm & gm)
            union = np.count_nonzero(pm | gm)
            iou_sum += inter / union
            acc_sum += inter / np.count_nonzero(gm)
    report = MetricReport(
        miou=iou_sum / gt_ids.size,
        macc=acc_sum / gt_ids.size,
        matching=matching,
    )
    report.validate()
    return report


def kmeans(tokens: np.ndarray, k: int, seed: int = 0,
           max_iters: int = 100, tol: float = 1e-6):
    """Lloyd clustering with distance-weighted seeding.

    Returns (labels, centers, inertia_history); empty clusters are dropped
    and the surviving labels re-densified, so the effective cluster count
    can be below k.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ShapeError("tokens must be a non-empty N x C matrix")
    n = tokens.shape[0]
    if not 1 <= k <= n:
        raise UsageError(f"k = {k} must lie in 1..{n}")
    rng = np.random.default_rng(seed)

    centers = tokens[[int(rng.integers(n))]]
    while centers.shape[0] < k:
        d2 = np.min(
            ((tokens[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1
        )
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers = np.vstack([centers, tokens[pick]])

    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d2 = ((tokens[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), labels].sum()))
        new_centers = []
        for c in range(centers.shape[0]):
            members = tokens[labels == c]
            if members.shape[0]:
                new_centers.append(members.mean(axis=0))
        new_centers = np.asarray(new_centers)
        if new_centers.shape == centers.shape:
            shift = np.max(np.linalg.norm(new_centers - centers, axis=1))
            centers = new_centers
            if shift < tol:
                break
        else:
            centers = new_centers  # a cluster emptied; keep iterating
    d2 = ((tokens[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    # densify: relabel surviving clusters 0..m-1 in first-appearance order
    _, dense = np.unique(labels, return_inverse=True)
    order = {}
    out = np.empty(n, dtype=np.int64)
    for i, lab in enumerate(dense):
        if lab not in order:
            order[lab] = len(order)
        out[i] = order[lab]
    return out, centers, history


def _square_grid_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise UsageError(f"{n} tokens do not form a square patch grid")
    return side


def kmeans_parts(tokens: np.ndarray, k: int, seed: int = 0) -> LabelGrid:
    """Cluster token features and lay the labels out on the patch grid."""
    labels, _, _ = kmeans(tokens, k, seed)
    side = _square_grid_side(labels.size)
    return LabelGrid.from_labels(labels.reshape(side, side))


def fiedler_vector(affinity: np.ndarray, residual_tol: float = 1e-8,
                   max_iters: int = 10_000) -> np.ndarray:
    """Second-smallest generalized eigenvector of (D - W, D), unit norm.

    Works on the symmetric normalized form: the known null direction is
    deflated out and the next eigenvector found by inverse power iteration.
    """
    w = np.asarray(affinity, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError("affinity must be square")
    n = w.shape[0]
    if n < 2:
        raise UsageError("need at least two nodes to bipartition")
    if not np.all(np.isfinite(w)):
        raise NumericError("affinity contains non-finite entries")
    deg = w.sum(axis=1)
    if np.any(deg <= 0.0):
        raise NumericError("zero-degree node; affinity floor missing")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - (inv_sqrt[:, None] * w * inv_sqrt[None, :])
    lap = 0.5 * (lap + lap.T)
    null_dir = np.sqrt(deg)
    null_dir /= np.linalg.norm(null_dir)
    # push the known zero eigenvalue out of the way, then the smallest
    # eigenvalue of the shifted operator is the one we want
    shifted = lap + 2.0 * np.outer(null_dir, null_dir)

    vec = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    vec -= null_dir * (null_dir @ vec)
    if np.linalg.norm(vec) < 1e-12:
        vec = np.random.default_rng(0).standard_normal(n)
        vec -= null_dir * (null_dir @ vec)
    vec /= np.linalg.norm(vec)

    for _ in range(max_iters):
        try:
            nxt = np.linalg.solve(shifted, vec)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"eigen iteration broke down: {exc}") from exc
        nxt -= null_dir * (null_dir @ nxt)
        norm = np.linalg.norm(nxt)
        if norm < 1e-300:
            raise NumericError("eigen iteration collapsed to zero")
        vec = nxt / norm
        lam = float(vec @ lap @ vec)
        if np.linalg.norm(lap @ vec - lam * vec) <= residual_tol:
            out = inv_sqrt * vec
            out /= np.linalg.norm(out)
            if out[int(np.argmax(np.abs(out)))] < 0:
                out = -out
            return out
    raise NumericError(
        f"eigen iteration missed {residual_tol} residual in {max_iters} steps"
    )


def token_affinity(tokens: np.ndarray, tau_aff: float = 0.2,
                   floor: float = 1e-5) -> np.ndarray:
    """Thresholded cosine affinity: 1 above tau_aff, a small floor below."""
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("tokens must be N x C")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    cos = unit @ unit.T
    return np.where(cos >= tau_aff, 1.0, floor)


def ncut_saliency(tokens: np.ndarray, dep_mask: np.ndarray | None = None,
                  alpha: float = 1.0, tau_aff: float = 0.2) -> LabelGrid:
    """Foreground/background split of tokens by a normalized-cut sign test.

    The affinity graph is thresholded token cosine similarity, optionally
    plus alpha times the symmetrized dependency mask.  The side holding
    the token with the largest received mass is called foreground.
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise UsageError("need an N x C token matrix with N >= 2")
    n = x.shape[0]
    w = token_affinity(x, tau_aff)
    if dep_mask is not None:
        m = np.asarray(dep_mask, dtype=np.float64)
        if m.shape != (n, n):
            raise ShapeError("dependency mask must be N x N")
        w = w + alpha * 0.5 * (m + m.T)
    vec = fiedler_vector(w)
    side = vec >= vec.mean()
    received = m.sum(axis=1) if dep_mask is not None else w.sum(axis=1)
    anchor = int(np.argmax(received))
    fg = side if side[anchor] else ~side
    grid = _square_grid_side(n)
    return LabelGrid.from_labels(fg.astype(np.int64).reshape(grid, grid))


def saliency_metrics(pred, gt, beta2: float = 0.3) -> MetricReport:
    """Score a soft foreground map against a binary reference mask.

    max_f_beta sweeps thresholds 0.00..1.00 in steps of 0.01; IoU and
    accuracy are read at threshold 0.5.
    """
    p = np.asarray(pred.labels if isinstance(pred, LabelGrid) else pred,
                   dtype=np.float64)
    g = np.asarray(gt.labels if isinstance(gt, LabelGrid) else gt)
    if p.shape != g.shape:
        raise ShapeError("prediction and reference masks differ in shape")
    if p.min() < 0.0 or p.max() > 1.0:
        raise UsageError("soft prediction must lie in [0, 1]")
    g = g.astype(bool).ravel()
    p = p.ravel()

    best_f = 0.0
    for i in range(101):
        t = i / 100.0
        b = p >= t
        tp = np.count_nonzero(b & g)
        prec = tp / b.sum() if b.any() else 0.0
        rec = tp / g.sum() if g.any() else 0.0
        denom = beta2 * prec + rec
        f = (1.0 + beta2) * prec * rec / denom if denom > 0 else 0.0
        best_f = max(best_f, f)

    b = p >= 0.5
    union = np.count_nonzero(b | g)
    inter = np.count_nonzero(b & g)
    iou = inter / union if union else 1.0
    acc = float(np.mean(b == g))
    report = MetricReport(max_f_beta=best_f, iou=iou, acc=acc)
    report.validate()
    return report


def downsample_majority(mask: np.ndarray, patch: int) -> LabelGrid:
    """Pixel labels to patch labels by majority vote, low label on ties."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] % patch or m.shape[1] % patch:
        raise ShapeError("mask dimensions must be multiples of the patch size")
    gh, gw = m.shape[0] // patch, m.shape[1] // patch
    out = np.zeros((gh, gw), dtype=np.int64)
    for i in range(gh):
        for j in range(gw):
            cell = m[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch]
            vals, counts = np.unique(cell, return_counts=True)
            out[i, j] = int(vals[np.argmax(counts)])
    # a part can vanish under the vote, so re-densify the survivors
    vals = np.unique(out)
    vals = vals[vals >= 0]
    dense = np.full_like(out, -1)
    for new, old in enumerate(vals):
        dense[out == old] = new
    return LabelGrid.from_labels(dense)
