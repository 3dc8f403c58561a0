"""Bipartite matching between queries and ground truth, plus the training loss.

Matching runs on detached numpy values: the cost of pairing target j with
query i combines mask quality (full supervision only), the probability the
query assigns to the target's characters, and the probability it assigns to
the text class. The assignment minimizes total cost with an exhaustive
augmenting-path solver; among equal-cost optima the lexicographically
smallest assignment (by target order, then query index) is returned, so
matching is deterministic.

Losses are built on the autodiff graph. Supervision kinds differ only in
which terms exist: full uses all of them, text-only drops the mask terms,
and weak supervises exactly one matched query so every other query's class
logits receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from textspot import autodiff as ad
from textspot.heads import CLASS_NO_TEXT, CLASS_TEXT

_TIE_TOL = 1e-9


@dataclass
class TargetInstance:
    """Numeric ground truth for one word."""

    char_ids: np.ndarray            # (K,) int64, right-padded with the pad index
    mask: np.ndarray | None = None  # (Hq, Wq) bool at quarter scale; None unless full
    transcription: str = ""


@dataclass
class TargetSet:
    kind: str                       # "full" | "text" | "weak"
    instances: list


@dataclass
class MatchCostMatrix:
    values: np.ndarray              # (num_targets, num_queries)


@dataclass
class Assignment:
    pairs: list                     # [(target_index, query_index)] sorted by target
    total_cost: float


@dataclass
class LossWeights:
    lambda_mask: float = 5.0
    lambda_rec: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class LossReport:
    total: float
    cls: float
    dice: float
    focal: float
    rec: float
    kind: str
    num_matched: int


# Fraction of a pooling block that must be foreground for the quarter-scale
# target to mark it. 6/16 keeps the nearest-upsampled target close to the
# full-resolution mask under IoU; OR-pooling fattens thin strokes so far that
# even a perfect prediction can fall under the 0.5 detection threshold.
MASK_POOL_FRACTION = 0.375


def targets_from_sample(sample, charset, num_char_queries, quarter_shape):
    """Encode a sample's instances; full masks are majority-pooled to 1/4."""
    hq, wq = quarter_shape
    instances = []
    for inst in sample.instances:
        ids = charset.encode(inst.transcription, length=num_char_queries)
        mask = None
        if sample.kind == "full":
            h, w = inst.mask.shape
            fy, fx = h // hq, w // wq
            blocks = inst.mask.reshape(hq, fy, wq, fx).mean(axis=(1, 3))
            mask = blocks >= MASK_POOL_FRACTION
            if inst.mask.any() and not mask.any():
                mask = blocks > 0.0  # sub-threshold sliver: keep it trainable
        instances.append(TargetInstance(char_ids=ids, mask=mask, transcription=inst.transcription))
    return TargetSet(kind=sample.kind, instances=instances)


# -- matching costs (plain numpy, detached) -----------------------------------


def recognition_cost(char_logits, char_ids):
    """Mean over positions of the predicted probability of the target id, per query."""
    probs = _softmax_np(np.asarray(char_logits, dtype=np.float64), axis=-1)  # (N, K, C)
    k = probs.shape[1]
    return probs[:, np.arange(k), np.asarray(char_ids)].mean(axis=-1)


def classification_cost(class_probs):
    """Probability each query assigns to the text class."""
    return np.asarray(class_probs, dtype=np.float64)[:, CLASS_TEXT]


def mask_cost(mask_logits, target_mask):
    """Dice loss of the sigmoid mask plus mean binary cross-entropy, per query."""
    logits = np.asarray(mask_logits, dtype=np.float64).reshape(len(mask_logits), -1)
    g = np.asarray(target_mask, dtype=np.float64).ravel()
    p = 1.0 / (1.0 + np.exp(-logits))
    inter = p @ g
    dice = 1.0 - (2.0 * inter + 1.0) / (p.sum(axis=1) + g.sum() + 1.0)
    pc = np.clip(p, 1e-7, 1.0 - 1e-7)
    bce = -(np.log(pc) @ g + np.log1p(-pc) @ (1.0 - g)) / g.size
    return dice + bce


def cost_matrix(class_probs, mask_logits, char_logits, targets):
    """(num_targets, num_queries) matching costs for one sample."""
    cls = classification_cost(class_probs)
    rows = []
    for inst in targets.instances:
        rec = recognition_cost(char_logits, inst.char_ids)
        row = -rec - cls
        if targets.kind == "full":
            row = row + mask_cost(mask_logits, inst.mask)
        rows.append(row)
    values = np.stack(rows) if rows else np.zeros((0, np.asarray(class_probs).shape[0]))
    return MatchCostMatrix(values=values)


def _softmax_np(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# -- assignment ----------------------------------------------------------------


def hungarian(cost):
    """Min-cost assignment of every row to a distinct column, rows <= columns.

    Returns the lexicographically smallest optimum: row 0 takes the lowest
    column index consistent with overall optimality, then row 1, and so on.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite values")
    rows, cols = cost.shape
    if rows > cols:
        raise ValueError(f"cannot assign {rows} rows to only {cols} columns")
    if rows == 0:
        return Assignment(pairs=[], total_cost=0.0)
    best = _optimal_total(cost)
    tol = _TIE_TOL * max(1.0, abs(best))
    available = list(range(cols))
    pairs = []
    fixed = 0.0
    for r in range(rows):
        rest = np.arange(r + 1, rows)
        chosen = None
        for c in available:
            others = [x for x in available if x != c]
            remainder = _optimal_total(cost[np.ix_(rest, others)]) if rest.size else 0.0
            if abs(fixed + cost[r, c] + remainder - best) <= tol:
                chosen = c
                break
        if chosen is None:
            raise RuntimeError("assignment search lost the optimum; cost ties exceed tolerance")
        pairs.append((r, chosen))
        available.remove(chosen)
        fixed += cost[r, chosen]
    return Assignment(pairs=pairs, total_cost=float(sum(cost[r, c] for r, c in pairs)))


def _optimal_total(cost):
    """Optimal assignment value for a rows <= cols matrix (rows all assigned)."""
    rows, cols = cost.shape
    if rows == 0:
        return 0.0
    # pad with constant rows so the matrix is square; they add nothing
    if rows < cols:
        square = np.vstack([cost, np.zeros((cols - rows, cols))])
    else:
        square = cost
    n = square.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)   # match[j] = row assigned to column j, 1-based
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = square[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
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
    total = 0.0
    for j in range(1, n + 1):
        if 1 <= match[j] <= rows:
            total += cost[match[j] - 1, j - 1]
    return float(total)


def match(class_probs, mask_logits, char_logits, targets):
    """Cost matrix plus Hungarian assignment in one step."""
    costs = cost_matrix(class_probs, mask_logits, char_logits, targets)
    return hungarian(costs.values)


# -- losses (autodiff graph) -----------------------------------------------------


def dice_loss(pred_probs, target):
    """Soft dice over a batch: 1 - (2*sum(p*g) + 1) / (sum(p) + sum(g) + 1), averaged.

    ``pred_probs`` is (M, ...) with instances along the first axis.
    """
    target = np.asarray(target, dtype=np.float64)
    axes = tuple(range(1, pred_probs.ndim))
    g = ad.Tensor(np.asarray(target, dtype=str(pred_probs.dtype)))
    g_sums = ad.Tensor(np.asarray(target.reshape(target.shape[0], -1).sum(axis=1), dtype=str(pred_probs.dtype)))
    inter = ad.sum_(pred_probs * g, axis=axes)
    denom = ad.sum_(pred_probs, axis=axes) + g_sums
    score = (inter * 2.0 + 1.0) / (denom + 1.0)
    return ad.mean_(1.0 - score)


def focal_loss(pred_probs, target, alpha=0.25, gamma=2.0):
    """Mean focal BCE over every element of the batch.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log.
    """
    g = np.asarray(target, dtype=np.float64)
    p = ad.clip(pred_probs, 1e-7, 1.0 - 1e-7)
    gt = ad.Tensor(np.asarray(g, dtype=str(pred_probs.dtype)))
    p_t = p * gt + (1.0 - p) * (1.0 - gt)
    alpha_t = np.asarray(alpha * g + (1.0 - alpha) * (1.0 - g), dtype=str(pred_probs.dtype))
    weight = ad.pow_scalar(1.0 - p_t, gamma) * ad.Tensor(alpha_t)
    return ad.mean_(-(weight * ad.log(p_t)))


def _log_softmax(logits):
    shift = logits.data.max(axis=-1, keepdims=True)
    shifted = logits - ad.Tensor(np.asarray(shift, dtype=str(logits.dtype)))
    lse = ad.log(ad.sum_(ad.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def total_loss(class_logits, mask_logits, char_logits, targets, assignment, weights=None):
    """Combined loss for one sample under its supervision kind.

    Returns the scalar loss tensor and a float report of its components.
    Classification is cross-entropy over all queries for full and text-only
    supervision (matched queries target "text", the rest "no-text"); under
    weak supervision only the single matched query contributes. Mask terms
    exist only under full supervision and average over matched pairs;
    recognition averages per-position cross-entropy (padding included) over
    matched pairs.
    """
    weights = weights or LossWeights()
    kind = targets.kind
    pairs = assignment.pairs
    n = class_logits.shape[0]
    matched_q = np.array([q for _, q in pairs], dtype=np.int64)
    logp_cls = _log_softmax(class_logits)

    if kind == "weak":
        if len(pairs) != 1:
            raise ValueError(f"weak supervision needs exactly one matched pair, got {len(pairs)}")
        cls = -logp_cls[int(matched_q[0]), CLASS_TEXT]
    else:
        cls_target = np.full(n, CLASS_NO_TEXT, dtype=np.int64)
        cls_target[matched_q] = CLASS_TEXT
        cls = ad.mean_(-logp_cls[np.arange(n), cls_target])

    dice = focal = None
    if kind == "full" and pairs:
        pred = ad.sigmoid(mask_logits[matched_q])
        gt = np.stack([targets.instances[t].mask for t, _ in pairs]).astype(np.float64)
        dice = dice_loss(pred, gt)
        focal = focal_loss(pred, gt, alpha=weights.focal_alpha, gamma=weights.focal_gamma)

    rec = None
    if pairs:
        logp_rec = _log_softmax(char_logits[matched_q])            # (M, K, C)
        ids = np.stack([targets.instances[t].char_ids for t, _ in pairs])
        m, k = ids.shape
        picked = logp_rec[np.arange(m)[:, None], np.arange(k)[None, :], ids]
        rec = ad.mean_(-picked)

    total = cls
    if dice is not None:
        total = total + (dice + focal) * weights.lambda_mask
    if rec is not None:
        total = total + rec * weights.lambda_rec

    report = LossReport(
        total=float(total.data),
        cls=float(cls.data),
        dice=float(dice.data) if dice is not None else 0.0,
        focal=float(focal.data) if focal is not None else 0.0,
        rec=float(rec.data) if rec is not None else 0.0,
        kind=kind,
        num_matched=len(pairs),
    )
    return total, report
