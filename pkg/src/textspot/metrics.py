"""Spotting metrics: detection P/R/F, normalized edit similarity, end-to-end F.

Predictions and ground truths are matched greedily by descending mask IoU at
a 0.5 threshold. Detection counts matched pairs; the end-to-end variant
additionally requires the exact transcription; 1-NED averages the edit
similarity of every ground-truth instance, scoring unmatched ones 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IOU_THRESHOLD = 0.5


@dataclass
class Metrics:
    det_precision: float
    det_recall: float
    det_f: float
    one_minus_ned: float
    e2e_f: float

    def as_row(self):
        return (self.det_precision, self.det_recall, self.det_f, self.one_minus_ned, self.e2e_f)


def levenshtein(a, b):
    """Edit distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def one_minus_ned(a, b):
    """1 - edit distance normalized by the longer string; 1.0 for two empties."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


def mask_iou(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 0.0


def match_masks(pred_masks, gt_masks, iou_thresh=IOU_THRESHOLD):
    """Greedy one-to-one matching by descending IoU; ties break on low indices.

    Returns a list of (pred_index, gt_index, iou) with iou >= iou_thresh.
    """
    pairs = []
    for pi, pm in enumerate(pred_masks):
        for gi, gm in enumerate(gt_masks):
            iou = mask_iou(pm, gm)
            if iou >= iou_thresh:
                pairs.append((-iou, pi, gi))
    pairs.sort()
    used_p, used_g, matches = set(), set(), []
    for neg_iou, pi, gi in pairs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        matches.append((pi, gi, -neg_iou))
    return matches


def evaluate_predictions(per_sample):
    """Aggregate metrics over (predictions, ground_truths) sample pairs.

    Each element of ``per_sample`` is a pair of lists of (mask, transcription)
    tuples. Counts accumulate over the whole dataset; 1-NED is the mean over
    all ground-truth instances.
    """
    n_pred = n_gt = tp = tp_e2e = 0
    ned_sum = 0.0
    for preds, gts in per_sample:
        n_pred += len(preds)
        n_gt += len(gts)
        matches = match_masks([m for m, _ in preds], [m for m, _ in gts])
        matched_gt = {}
        for pi, gi, _ in matches:
            matched_gt[gi] = pi
        tp += len(matches)
        for gi, (gm, gtext) in enumerate(gts):
            pi = matched_gt.get(gi)
            if pi is None:
                continue
            ptext = preds[pi][1]
            ned_sum += one_minus_ned(ptext, gtext)
            if ptext == gtext:
                tp_e2e += 1
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    p_e2e = tp_e2e / n_pred if n_pred else 0.0
    r_e2e = tp_e2e / n_gt if n_gt else 0.0
    return Metrics(
        det_precision=precision,
        det_recall=recall,
        det_f=_harmonic(precision, recall),
        one_minus_ned=ned_sum / n_gt if n_gt else 0.0,
        e2e_f=_harmonic(p_e2e, r_e2e),
    )


def _harmonic(p, r):
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def evaluate_model(model, samples):
    """Run the model over fully annotated samples and score the results."""
    per_sample = []
    for sample in samples:
        if sample.kind != "full":
            raise ValueError(f"evaluation needs full annotations, sample {sample.sample_id!r} is {sample.kind!r}")
        results = model.spot(sample.image)
        preds = [(r.mask, r.transcription) for r in results]
        gts = [(inst.mask, inst.transcription) for inst in sample.instances]
        per_sample.append((preds, gts))
    return evaluate_predictions(per_sample)
