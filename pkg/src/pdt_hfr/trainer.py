"""Siamese training of the PDT block in front of a frozen backbone.

Source images go straight into the backbone; target images pass through the
PDT block first. Only PDT parameters are updated (Adam). After every epoch the
validation loss is measured on a fixed set of validation batches and the
parameters with the lowest validation loss are kept.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import Backbone, replicate_channels
from .container import container_write
from .dataset import ImageStore, Manifest
from .errors import ConfigError, DataError, TrainingDiverged
from .losses import ContrastiveConfig, MmdConfig, composite_unpaired_loss, contrastive_loss
from .pdt import PdtBlock
from .tensor import Tensor, no_grad, zero_grad

log = logging.getLogger(__name__)

SUPERVISIONS = ("contrastive", "mmd_ip", "mmd_op", "mmd_ip_op")
CHECKPOINT_NAME = "best.pdtc"
RUN_LOG_NAME = "run.log"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 90
    margin: float = 2.0
    seed: int = 0
    supervision: str = "contrastive"
    genuine_fraction: float = 0.5
    mmd: MmdConfig = field(default_factory=MmdConfig)

    def validate(self) -> "TrainConfig":
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.supervision not in SUPERVISIONS:
            raise ConfigError(f"supervision must be one of {SUPERVISIONS}, got {self.supervision!r}")
        if not 0 < self.genuine_fraction < 1:
            raise ConfigError(f"genuine_fraction must lie in (0, 1), got {self.genuine_fraction}")
        ContrastiveConfig(self.margin).validate()
        self.mmd.validate()
        return self

    @property
    def mmd_placement(self) -> str | None:
        return self.supervision[len("mmd_"):] if self.supervision.startswith("mmd_") else None


# --- pair sampling -------------------------------------------------------------

@dataclass
class PairBatch:
    x_s: np.ndarray
    x_t: np.ndarray
    y_p: np.ndarray
    ids_s: list[str]
    ids_t: list[str]

    def __len__(self):
        return len(self.y_p)


class SplitImages:
    """All images of one manifest split, grouped by identity and domain."""

    def __init__(self, manifest: Manifest, split: str, store: ImageStore | None = None):
        store = store or ImageStore(manifest)
        self.split = split
        self.by_id: dict[str, dict[str, list[np.ndarray]]] = {}
        for row in manifest.select(split):
            self.by_id.setdefault(row.id, {"source": [], "target": []})[row.domain].append(store.load(row))
        self.ids = sorted(i for i, d in self.by_id.items() if d["source"] and d["target"])
        if len(self.ids) < 2:
            raise DataError(f"split {split!r} has {len(self.ids)} identities with both domains; need >= 2")

    def genuine_pair_count(self) -> int:
        return sum(len(self.by_id[i]["source"]) * len(self.by_id[i]["target"]) for i in self.ids)


def sample_pairs(
    images: SplitImages,
    batch_size: int,
    genuine_fraction: float,
    rng: np.random.Generator | int,
) -> PairBatch:
    """``round(genuine_fraction * B)`` genuine cross-domain pairs, then impostors."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    ids = images.ids
    n_gen = round(genuine_fraction * batch_size)
    xs, xt, ys, id_s, id_t = [], [], [], [], []
    for k in range(batch_size):
        a = ids[rng.integers(len(ids))]
        if k < n_gen:
            b = a
        else:
            others = [i for i in ids if i != a]
            b = others[rng.integers(len(others))]
        src = images.by_id[a]["source"]
        tgt = images.by_id[b]["target"]
        xs.append(src[rng.integers(len(src))])
        xt.append(tgt[rng.integers(len(tgt))])
        ys.append(0.0 if a == b else 1.0)
        id_s.append(a)
        id_t.append(b)
    return PairBatch(np.stack(xs), np.stack(xt), np.array(ys), id_s, id_t)


# --- optimiser -----------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params[i].data``."""
    if len(params) != len(state.m):
        raise RuntimeError(f"optimizer state tracks {len(state.m)} tensors, got {len(params)}")
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != m.shape or p.data.shape != m.shape:
            raise RuntimeError(f"gradient shape {g.shape} does not match optimizer state {m.shape}")
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# --- losses over a batch ---------------------------------------------------------

def batch_loss(pdt: PdtBlock, backbone: Backbone, batch: PairBatch, cfg: TrainConfig) -> Tensor:
    x_s = Tensor(batch.x_s)
    x_t_hat = pdt(replicate_channels(Tensor(batch.x_t)))
    e_s = backbone.embed(x_s)
    e_t = backbone.embed(x_t_hat)
    if cfg.supervision == "contrastive":
        return contrastive_loss(e_s, e_t, batch.y_p, ContrastiveConfig(cfg.margin))
    mmd_cfg = replace(cfg.mmd, placement=cfg.mmd_placement)
    return composite_unpaired_loss(x_s, x_t_hat, e_s, e_t, mmd_cfg)


def steps_per_epoch(images: SplitImages, cfg: TrainConfig) -> int:
    """ceil(total pairs / batch size), where total pairs is the genuine pair
    count scaled up so the genuine share matches ``genuine_fraction``."""
    total = images.genuine_pair_count() / cfg.genuine_fraction
    return max(1, math.ceil(round(total, 9) / cfg.batch_size))


def validation_batches(images: SplitImages, cfg: TrainConfig) -> list[PairBatch]:
    rng = np.random.default_rng([cfg.seed, 2])
    return [
        sample_pairs(images, cfg.batch_size, cfg.genuine_fraction, rng)
        for _ in range(steps_per_epoch(images, cfg))
    ]


def validation_loss(pdt: PdtBlock, backbone: Backbone, batches: list[PairBatch], cfg: TrainConfig) -> float:
    with no_grad():
        return math.fsum(batch_loss(pdt, backbone, b, cfg).item() for b in batches) / len(batches)


# --- training loop ---------------------------------------------------------------

@dataclass
class TrainReport:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    checkpoint_path: Path | None
    seconds: float
    checkpoint: bytes = b""

    @property
    def best_val_loss(self) -> float:
        return self.val_losses[self.best_epoch - 1]


def train(
    pdt: PdtBlock,
    backbone: Backbone,
    manifest: Manifest,
    cfg: TrainConfig,
    out_dir=None,
) -> TrainReport:
    """Train ``pdt`` in place; on return it holds the best-validation weights.

    With ``out_dir`` set, the best checkpoint and a per-epoch log
    (``epoch train_loss val_loss``) are written there.
    """
    cfg = cfg.validate()
    started = time.perf_counter()
    store = ImageStore(manifest)
    train_images = SplitImages(manifest, "train", store)
    val_images = SplitImages(manifest, "val", store)
    val_batches = validation_batches(val_images, cfg)
    n_steps = steps_per_epoch(train_images, cfg)
    params = pdt.parameters()
    state = AdamState.zeros(params)
    rng = np.random.default_rng([cfg.seed, 1])

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        run_log = open(out_path / RUN_LOG_NAME, "w", encoding="utf-8")
    else:
        run_log = None

    train_losses: list[float] = []
    val_losses: list[float] = []
    history: list[float] = []
    best_epoch, best_bytes = 0, b""
    try:
        for epoch in range(1, cfg.epochs + 1):
            batch_losses = []
            for step in range(1, n_steps + 1):
                batch = sample_pairs(train_images, cfg.batch_size, cfg.genuine_fraction, rng)
                zero_grad(params)
                loss = batch_loss(pdt, backbone, batch, cfg)
                value = loss.item()
                history.append(value)
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, step, history)
                loss.backward()
                adam_step(params, [p.grad for p in params], state, cfg)
                batch_losses.append(value)
            zero_grad(params)
            train_losses.append(math.fsum(batch_losses) / len(batch_losses))
            val = validation_loss(pdt, backbone, val_batches, cfg)
            if not math.isfinite(val):
                raise TrainingDiverged(epoch, "validation", history)
            val_losses.append(val)
            if best_epoch == 0 or val < val_losses[best_epoch - 1]:
                best_epoch, best_bytes = epoch, pdt.to_bytes()
                if out_path is not None:
                    container_write(out_path / CHECKPOINT_NAME, pdt.state())
            line = f"{epoch} {train_losses[-1]!r} {val!r}"
            log.info("epoch %s", line)
            if run_log is not None:
                run_log.write(line + "\n")
                run_log.flush()
    finally:
        if run_log is not None:
            run_log.close()

    best = PdtBlock.from_bytes(best_bytes, pdt.config)
    for name, p in pdt.params.items():
        p.data[...] = best.params[name].data
    return TrainReport(
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best_epoch,
        checkpoint_path=out_path / CHECKPOINT_NAME if out_path is not None else None,
        seconds=time.perf_counter() - started,
        checkpoint=best_bytes,
    )
