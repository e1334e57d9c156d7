"""Embedding and evaluation of a manifest's gallery/probe protocol."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone, replicate_channels
from .dataset import ImageStore, Manifest
from .metrics import MetricsReport, ScoreSet, evaluate_scores, roc, score_matrix
from .pdt import PdtBlock
from .tensor import Tensor, no_grad

EMBED_CHUNK = 32


def embed_images(backbone: Backbone, images: np.ndarray, pdt: PdtBlock | None = None) -> np.ndarray:
    """Embed an [N, C, H, W] array, optionally through ``pdt`` first."""
    out = []
    with no_grad():
        for lo in range(0, images.shape[0], EMBED_CHUNK):
            x = Tensor(images[lo : lo + EMBED_CHUNK])
            if pdt is not None:
                x = pdt(replicate_channels(x))
            out.append(backbone.embed(x).data)
    return np.concatenate(out, axis=0)


def evaluate_manifest(
    backbone: Backbone,
    manifest: Manifest,
    pdt: PdtBlock | None = None,
    direction: str = "st",
) -> tuple[MetricsReport, ScoreSet, list[tuple[float, float]]]:
    """Metrics for the eval split.

    ``st``: source-domain gallery, target-domain probes.
    ``ts``: target-domain gallery, source-domain probes.
    Target-domain images go through ``pdt`` when one is given.
    """
    if direction not in ("st", "ts"):
        raise ValueError(f"direction must be 'st' or 'ts', got {direction!r}")
    store = ImageStore(manifest)
    source_rows = manifest.select("eval_gallery")
    target_rows = manifest.select("eval_probe")
    e_source = embed_images(backbone, store.stack(source_rows))
    e_target = embed_images(backbone, store.stack(target_rows), pdt)
    source_ids = [r.id for r in source_rows]
    target_ids = [r.id for r in target_rows]
    if direction == "st":
        gallery, gallery_ids, probes, probe_ids = e_source, source_ids, e_target, target_ids
    else:
        gallery, gallery_ids, probes, probe_ids = e_target, target_ids, e_source, source_ids
    report, sset = evaluate_scores(score_matrix(probes, gallery), probe_ids, gallery_ids)
    return report, sset, roc(sset)
