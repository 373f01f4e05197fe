"""Shared test utilities: finite-difference oracle and a brute-force AP oracle."""

import itertools

import numpy as np

from bmasklab import tensor as T

FD_H = 1e-5
FD_TOL = 1e-3


def fd_check(loss_fn, tensors, rng, n_coords=25, h=FD_H, tol=FD_TOL):
    """Compare analytic grads of loss_fn() against central differences.

    loss_fn rebuilds the graph on every call; tensors are the leaves to
    probe. Returns the worst relative error seen (asserts < tol).
    """
    loss = loss_fn()
    T.backward(loss)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1).copy()
        for i in rng.integers(0, flat.size, n_coords):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            rel = abs(numeric - grad[i]) / max(abs(numeric), abs(grad[i]), 1e-6)
            assert rel < tol, (f"gradient mismatch at coord {i}: "
                               f"analytic {grad[i]}, numeric {numeric}, rel {rel}")
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# brute-force AP oracle (independent of the evaluator implementation)


def _max_matching(pred_rows, n_preds):
    """Maximum bipartite matching size by exhaustive enumeration.

    pred_rows[i] is the set of groundtruth ids prediction i may match.
    Small inputs only (<= 5 predictions).
    """
    best = 0
    gt_ids = sorted(set().union(*pred_rows[:n_preds]) if n_preds else set())
    for assignment in itertools.product(*[list(r) + [None] for r in pred_rows[:n_preds]]):
        used = [g for g in assignment if g is not None]
        if len(used) == len(set(used)):
            best = max(best, len(used))
    return best


def brute_force_ap(predictions, dataset, threshold):
    """Exhaustive per-class PR computation at one IoU threshold.

    For every prefix of the score-sorted predictions, true positives are
    the size of a maximum matching between prefix predictions and
    same-scene same-class groundtruths at IoU >= threshold. AP is the
    101-point interpolation of the resulting PR points.
    """
    from bmasklab.imgproc import mask_iou

    gts = []
    for si, scene in enumerate(dataset):
        for inst in scene.instances:
            gts.append((si, inst.cls, inst.mask))
    classes = sorted({cls for _, cls, _ in gts})
    grid = np.linspace(0.0, 1.0, 101)

    ap_values = []
    for cls in classes:
        gt_ids = [i for i, g in enumerate(gts) if g[1] == cls]
        n_gt = len(gt_ids)
        preds = [p for p in predictions if p.cls == cls]
        order = np.argsort([-p.score for p in preds], kind="stable")
        preds = [preds[i] for i in order]
        rows = []
        for p in preds:
            row = {gi for gi in gt_ids
                   if gts[gi][0] == p.scene
                   and mask_iou(p.mask, gts[gi][2]) >= threshold}
            rows.append(row)
        if not preds:
            ap_values.append(0.0)
            continue
        precision, recall = [], []
        for k in range(1, len(preds) + 1):
            tp = _max_matching(rows, k)
            precision.append(tp / k)
            recall.append(tp / n_gt if n_gt else 0.0)
        ap = 0.0
        for r in grid:
            candidates = [p for p, rec in zip(precision, recall) if rec >= r]
            ap += max(candidates) if candidates else 0.0
        ap_values.append(ap / 101.0)
    return float(np.mean(ap_values)) if ap_values else 0.0
