"""Independent, deliberately naive re-implementations used as test oracles."""

import math


def naive_evaluate(truths, preds):
    n = len(truths)
    tae = {"LOW": 0.0, "MEDIUM": 0.0, "HIGH": 0.0}
    for t, p in zip(truths, preds):
        if t <= 30:
            band = "LOW"
        elif t <= 60:
            band = "MEDIUM"
        else:
            band = "HIGH"
        tae[band] += abs(t - p)
    total = 0.0
    for t, p in zip(truths, preds):
        total += abs(t - p)
    mean = sum(truths) / n
    ss_tot = sum((t - mean) ** 2 for t in truths)
    ss_res = sum((t - p) ** 2 for t, p in zip(truths, preds))
    r2 = math.nan if ss_tot == 0 else 1 - ss_res / ss_tot
    return {"tae": tae, "total": total, "mae": total / n, "r2": r2}
