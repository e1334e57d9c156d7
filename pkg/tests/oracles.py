"""Brute-force reference implementations used as test oracles.

Everything here is written for clarity with exact rational arithmetic; none of
it shares code with the package.
"""

from fractions import Fraction

import numpy as np


def thresholds(genuine, impostor):
    return sorted(set(genuine) | set(impostor) | {float("inf")})


def far_frr(genuine, impostor, t):
    fa = sum(1 for s in impostor if s >= t)
    fr = sum(1 for s in genuine if s < t)
    return Fraction(fa, len(impostor)), Fraction(fr, len(genuine))


def eer(genuine, impostor):
    best = None
    for t in thresholds(genuine, impostor):
        far, frr = far_frr(genuine, impostor, t)
        key = (abs(far - frr), far + frr)
        if best is None or key < best:
            best = key
    return float(best[1] / 2)


def auc(genuine, impostor):
    wins = Fraction(0)
    for g in genuine:
        for i in impostor:
            if g > i:
                wins += 1
            elif g == i:
                wins += Fraction(1, 2)
    return float(wins / (len(genuine) * len(impostor)))


def vr_at_far(genuine, impostor, target):
    limit = Fraction(target)
    for t in thresholds(genuine, impostor):  # ascending: first admissible is the smallest
        far, frr = far_frr(genuine, impostor, t)
        if far <= limit:
            return float(1 - frr), t
    raise AssertionError("+inf threshold always admissible")


def rank1(scores, probe_ids, gallery_ids):
    """Best identity per probe: max score per identity, ties to the identity seen first."""
    order = []
    for gid in gallery_ids:
        if gid not in order:
            order.append(gid)
    hits = 0
    for p in range(len(probe_ids)):
        per_id = {gid: max(scores[p][j] for j in range(len(gallery_ids)) if gallery_ids[j] == gid) for gid in order}
        best_id = order[0]
        for gid in order[1:]:
            if per_id[gid] > per_id[best_id]:
                best_id = gid
        hits += best_id == probe_ids[p]
    return hits / len(probe_ids)


def random_score_set(rng, max_size=500):
    """Random genuine/impostor lists, sometimes heavily tied."""
    ng = int(rng.integers(1, max_size // 2))
    ni = int(rng.integers(1, max_size - ng))
    shift = rng.uniform(-1, 2)
    g = rng.normal(shift, 1.0, ng)
    i = rng.normal(0.0, 1.0, ni)
    decimals = rng.choice([None, 0, 1, 2])
    if decimals is not None:
        g, i = np.round(g, decimals), np.round(i, decimals)
    return g.tolist(), i.tolist()
