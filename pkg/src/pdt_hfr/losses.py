"""Pairwise contrastive loss and RBF-kernel maximum mean discrepancy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericDegenerateError, ValidationError
from .tensor import Tensor

PLACEMENTS = ("ip", "op", "ip_op")
BANDWIDTH_MODES = ("median_heuristic", "fixed")


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float = 2.0

    def validate(self) -> "ContrastiveConfig":
        if not self.margin >= 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        return self


@dataclass(frozen=True)
class MmdConfig:
    kernel: str = "rbf"
    bandwidth_mode: str = "median_heuristic"
    fixed_sigma: float = 1.0
    placement: str = "ip_op"

    def validate(self) -> "MmdConfig":
        if self.kernel != "rbf":
            raise ConfigError(f"only the rbf kernel is supported, got {self.kernel!r}")
        if self.bandwidth_mode not in BANDWIDTH_MODES:
            raise ConfigError(f"bandwidth_mode must be one of {BANDWIDTH_MODES}, got {self.bandwidth_mode!r}")
        if self.bandwidth_mode == "fixed" and not self.fixed_sigma > 0:
            raise ConfigError(f"fixed_sigma must be > 0, got {self.fixed_sigma}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        return self


def _labels(y_p, n: int) -> np.ndarray:
    y = np.asarray(y_p, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ValidationError(f"got {y.shape[0]} labels for {n} pairs")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError(f"pair labels must be 0 or 1, got {sorted(set(y.tolist()) - {0.0, 1.0})[:3]}")
    return y


def contrastive_per_pair(e_s: Tensor, e_t: Tensor, y_p, cfg: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """Per-pair loss; ``y_p = 0`` marks a same-identity (genuine) pair.

    genuine:  d^2 / 2
    impostor: max(0, margin - d)^2 / 2
    with d the Euclidean distance between the two embeddings.
    """
    cfg.validate()
    e_s, e_t = T.as_tensor(e_s), T.as_tensor(e_t)
    if e_s.shape != e_t.shape or e_s.ndim != 2:
        raise ValidationError(f"embedding batches must share shape [N, D], got {e_s.shape} and {e_t.shape}")
    y = Tensor(_labels(y_p, e_s.shape[0]))
    diff = e_s - e_t
    sq_dist = (diff * diff).sum(axis=1)
    hinge = T.maximum_scalar(cfg.margin - T.sqrt(sq_dist), 0.0)
    return (1.0 - y) * 0.5 * sq_dist + y * 0.5 * hinge * hinge


def contrastive_loss(e_s: Tensor, e_t: Tensor, y_p, cfg: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """Batch mean of :func:`contrastive_per_pair`."""
    return contrastive_per_pair(e_s, e_t, y_p, cfg).mean()


def _flatten(x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    return x if x.ndim == 2 else x.reshape(x.shape[0], -1)


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    sa = (a * a).sum(axis=1, keepdims=True)
    sb = (b * b).sum(axis=1, keepdims=True)
    d = sa + T.transpose(sb) - 2.0 * (a @ T.transpose(b))
    return T.maximum_scalar(d, 0.0)


def median_bandwidth(daa: np.ndarray, dbb: np.ndarray, dab: np.ndarray, dba: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled sample.

    Cross distances are symmetrised so swapping the two samples yields the
    identical multiset of values.
    """
    iu_a = np.triu_indices(daa.shape[0], k=1)
    iu_b = np.triu_indices(dbb.shape[0], k=1)
    cross = 0.5 * (dab + dba.T)
    pooled = np.concatenate([daa[iu_a], dbb[iu_b], cross.reshape(-1)])
    sigma = float(np.sqrt(np.median(pooled)))
    if not sigma > 0:
        raise NumericDegenerateError("median pairwise distance is zero; cannot set RBF bandwidth")
    return sigma


def mmd_loss(a: Tensor, b: Tensor, cfg: MmdConfig = MmdConfig()) -> Tensor:
    """Biased (V-statistic) squared MMD with an RBF kernel.

    Rows are samples; inputs with more than two axes are flattened per row.
    """
    cfg.validate()
    a, b = _flatten(a), _flatten(b)
    min_rows = 2 if cfg.bandwidth_mode == "median_heuristic" else 1
    if a.shape[0] < min_rows or b.shape[0] < min_rows:
        raise ValidationError(
            f"need at least {min_rows} rows per sample for {cfg.bandwidth_mode}, got {a.shape[0]} and {b.shape[0]}"
        )
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    daa, dbb = _sq_dists(a, a), _sq_dists(b, b)
    dab, dba = _sq_dists(a, b), _sq_dists(b, a)
    if cfg.bandwidth_mode == "fixed":
        sigma = float(cfg.fixed_sigma)
    else:
        sigma = median_bandwidth(daa.data, dbb.data, dab.data, dba.data)
    scale = -1.0 / (2.0 * sigma * sigma)

    def k(d):
        return T.exp(d * scale).mean()

    return (k(daa) + k(dbb)) - (k(dab) + k(dba))


def composite_unpaired_loss(
    x_s: Tensor | None,
    x_t_transformed: Tensor | None,
    e_s: Tensor | None,
    e_t: Tensor | None,
    cfg: MmdConfig = MmdConfig(),
) -> Tensor:
    """MMD on pixels (``ip``), on embeddings (``op``) or their plain sum."""
    cfg.validate()
    terms = []
    if cfg.placement in ("ip", "ip_op"):
        terms.append(mmd_loss(x_s, x_t_transformed, cfg))
    if cfg.placement in ("op", "ip_op"):
        terms.append(mmd_loss(e_s, e_t, cfg))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]
