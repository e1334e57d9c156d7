"""Verification and identification metrics over similarity scores.

All verification metrics are computed from integer accept counts at the
thresholds formed by the distinct score values (plus +inf), so results are
exact rank statistics: a strictly increasing transform of every score leaves
them unchanged. A score ``s`` is accepted at threshold ``t`` when ``s >= t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

FAR_TARGETS = (5e-2, 1e-2, 1e-3, 1e-4)
REPORT_KEYS = ("auc", "eer", "rank1") + tuple(f"vr_at_far_{t:.0e}".replace("e-0", "e-") for t in FAR_TARGETS)
UNIT_NORM_TOL = 1e-6


def far_key(target: float) -> str:
    return f"vr_at_far_{target:.0e}".replace("e-0", "e-")


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).reshape(-1)
        self.impostor = np.asarray(self.impostor, dtype=np.float64).reshape(-1)
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ValidationError(
                f"need genuine and impostor scores, got {self.genuine.size} and {self.impostor.size}"
            )
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise ValidationError("scores must be finite")


@dataclass
class OperatingPoints:
    """Accept counts per threshold, thresholds in decreasing order (first is +inf)."""

    thresholds: np.ndarray
    false_accepts: np.ndarray
    true_accepts: np.ndarray
    n_genuine: int
    n_impostor: int

    @property
    def far(self) -> np.ndarray:
        return self.false_accepts / self.n_impostor

    @property
    def tar(self) -> np.ndarray:
        return self.true_accepts / self.n_genuine


def operating_points(scores: ScoreSet) -> OperatingPoints:
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([gen, imp]))[::-1]])
    fa = imp.size - np.searchsorted(imp, thresholds, side="left")
    ta = gen.size - np.searchsorted(gen, thresholds, side="left")
    return OperatingPoints(thresholds, fa.astype(np.int64), ta.astype(np.int64), gen.size, imp.size)


def roc(scores: ScoreSet) -> list[tuple[float, float]]:
    """(FAR, TAR) points from (0, 0) to (1, 1)."""
    ops = operating_points(scores)
    return list(zip(ops.far.tolist(), ops.tar.tolist()))


def auc(scores: ScoreSet) -> float:
    """Trapezoidal area under the ROC; equals P(G > I) + P(G = I) / 2."""
    ops = operating_points(scores)
    fa = ops.false_accepts.tolist()
    ta = ops.true_accepts.tolist()
    twice_area = sum((fa[k] - fa[k - 1]) * (ta[k] + ta[k - 1]) for k in range(1, len(fa)))
    return twice_area / (2 * ops.n_genuine * ops.n_impostor)


def eer(scores: ScoreSet) -> float:
    """Mean of FAR and FRR at the threshold where they are closest.

    Ties in |FAR - FRR| go to the smaller FAR + FRR. No interpolation.
    """
    ops = operating_points(scores)
    ng, ni = ops.n_genuine, ops.n_impostor
    best = None
    for fa, ta in zip(ops.false_accepts.tolist(), ops.true_accepts.tolist()):
        fr = ng - ta
        key = (abs(fa * ng - fr * ni), fa * ng + fr * ni)
        if best is None or key < best:
            best = key
    return best[1] / (2 * ng * ni)


def vr_at_far(scores: ScoreSet, far_target: float) -> tuple[float, float]:
    """TAR at the smallest threshold whose FAR does not exceed ``far_target``.

    Returns ``(verification_rate, threshold)``; the threshold is +inf only when
    every finite candidate admits too many impostors.
    """
    if not 0 < far_target < 1:
        raise ValidationError(f"far_target must lie in (0, 1), got {far_target}")
    ops = operating_points(scores)
    allowed = math.floor(Fraction(far_target) * ops.n_impostor)
    ok = np.nonzero(ops.false_accepts <= allowed)[0]
    k = int(ok[-1])
    return float(ops.true_accepts[k] / ops.n_genuine), float(ops.thresholds[k])


# --- scoring -----------------------------------------------------------------

def _check_unit(e: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(e, axis=-1)
    bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
    if np.any(bad):
        raise ValidationError(f"{what} is not unit-normalised (norm {norms[bad].ravel()[0]:.9f})")


def score(e_a, e_b) -> float:
    """Cosine similarity of two unit vectors."""
    a = np.asarray(getattr(e_a, "data", e_a), dtype=np.float64).reshape(-1)
    b = np.asarray(getattr(e_b, "data", e_b), dtype=np.float64).reshape(-1)
    _check_unit(a, "first embedding")
    _check_unit(b, "second embedding")
    # elementwise product is symmetric, so the sum is too
    return float(np.sum(a * b))


def score_matrix(probes, gallery) -> np.ndarray:
    """[P, G] cosine similarities between unit-normalised rows."""
    p = np.asarray(getattr(probes, "data", probes), dtype=np.float64)
    g = np.asarray(getattr(gallery, "data", gallery), dtype=np.float64)
    _check_unit(p, "probe embedding")
    _check_unit(g, "gallery embedding")
    return p @ g.T


def split_scores(scores: np.ndarray, probe_ids: Sequence, gallery_ids: Sequence) -> ScoreSet:
    same = np.asarray(probe_ids, dtype=object)[:, None] == np.asarray(gallery_ids, dtype=object)[None, :]
    return ScoreSet(scores[same], scores[~same])


# --- identification ---------------------------------------------------------

@dataclass
class IdentificationSet:
    gallery: np.ndarray
    gallery_ids: list
    probes: np.ndarray
    probe_ids: list

    def __post_init__(self):
        self.gallery = np.asarray(getattr(self.gallery, "data", self.gallery), dtype=np.float64)
        self.probes = np.asarray(getattr(self.probes, "data", self.probes), dtype=np.float64)
        self.gallery_ids = list(self.gallery_ids)
        self.probe_ids = list(self.probe_ids)
        if len(self.gallery_ids) == 0:
            raise ValidationError("gallery is empty")
        if len(self.gallery_ids) != self.gallery.shape[0] or len(self.probe_ids) != self.probes.shape[0]:
            raise ValidationError("embedding rows and id lists differ in length")
        unknown = set(self.probe_ids) - set(self.gallery_ids)
        if unknown:
            raise ValidationError(f"probe ids {sorted(map(str, unknown))[:5]} are not enrolled in the gallery")


def rank1_from_scores(scores: np.ndarray, probe_ids: Sequence, gallery_ids: Sequence) -> float:
    """Fraction of probes whose best gallery identity is correct.

    Per identity the maximum over its gallery entries is used; identities are
    ordered by first appearance and ties go to the earliest.
    """
    if len(gallery_ids) == 0:
        raise ValidationError("gallery is empty")
    ids = list(dict.fromkeys(gallery_ids))
    column_id = np.array([ids.index(g) for g in gallery_ids])
    per_id = np.full((scores.shape[0], len(ids)), -np.inf)
    for j, col in enumerate(column_id):
        np.maximum(per_id[:, col], scores[:, j], out=per_id[:, col])
    predicted = per_id.argmax(axis=1)
    hits = sum(ids[k] == pid for k, pid in zip(predicted.tolist(), probe_ids))
    return hits / len(probe_ids)


def rank1(idset: IdentificationSet) -> float:
    return rank1_from_scores(score_matrix(idset.probes, idset.gallery), idset.probe_ids, idset.gallery_ids)


# --- reports ----------------------------------------------------------------

@dataclass
class MetricsReport:
    auc: float
    eer: float
    rank1: float
    vr_at_far: dict[float, float]
    thresholds: dict[float, float] = field(default_factory=dict)
    n_genuine: int = 0
    n_impostor: int = 0
    n_probes: int = 0

    def as_dict(self) -> dict[str, float]:
        out = {"auc": self.auc, "eer": self.eer, "rank1": self.rank1}
        for t in FAR_TARGETS:
            out[far_key(t)] = self.vr_at_far[t]
        return out

    def write(self, out_dir, roc_points: list[tuple[float, float]] | None = None) -> Path:
        """``metrics.txt`` (one ``key=value`` line per metric) and optionally ``roc.csv``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = [f"{k}={v!r}" for k, v in self.as_dict().items()]
        (out_dir / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        if roc_points is not None:
            write_roc_csv(out_dir / "roc.csv", roc_points)
        return out_dir / "metrics.txt"


def read_report(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = float(value)
    return out


def write_roc_csv(path, points: list[tuple[float, float]]) -> None:
    rows = ["FAR,TAR"] + [f"{far:.6f},{tar:.6f}" for far, tar in points]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def evaluate_scores(scores: np.ndarray, probe_ids: Sequence, gallery_ids: Sequence) -> tuple[MetricsReport, ScoreSet]:
    sset = split_scores(scores, probe_ids, gallery_ids)
    vr, thr = {}, {}
    for t in FAR_TARGETS:
        vr[t], thr[t] = vr_at_far(sset, t)
    report = MetricsReport(
        auc=auc(sset),
        eer=eer(sset),
        rank1=rank1_from_scores(scores, probe_ids, gallery_ids),
        vr_at_far=vr,
        thresholds=thr,
        n_genuine=sset.genuine.size,
        n_impostor=sset.impostor.size,
        n_probes=len(probe_ids),
    )
    return report, sset


def evaluate(idset: IdentificationSet) -> tuple[MetricsReport, ScoreSet]:
    """All metrics for a closed-set gallery/probe protocol."""
    return evaluate_scores(score_matrix(idset.probes, idset.gallery), idset.probe_ids, idset.gallery_ids)


def aggregate_folds(reports: Sequence[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of every metric across folds."""
    if not reports:
        raise ValidationError("need at least one fold report")
    out = {}
    for key in REPORT_KEYS:
        values = [r.as_dict()[key] for r in reports]
        mean = math.fsum(values) / len(values)
        var = math.fsum((v - mean) ** 2 for v in values) / len(values)
        out[key] = (mean, math.sqrt(var))
    return out
