import math

import numpy as np
import pytest

from pdt_hfr.backbone import backbone_toy
from pdt_hfr.container import container_read
from pdt_hfr.errors import ConfigError, TrainingDiverged
from pdt_hfr.pdt import PdtBlock
from pdt_hfr.tensor import Tensor
from pdt_hfr.trainer import (
    CHECKPOINT_NAME,
    RUN_LOG_NAME,
    SUPERVISIONS,
    AdamState,
    SplitImages,
    TrainConfig,
    adam_step,
    batch_loss,
    sample_pairs,
    steps_per_epoch,
    train,
    validation_batches,
    validation_loss,
)

FAST = TrainConfig(epochs=2, batch_size=8)


@pytest.fixture(scope="module")
def backbone():
    return backbone_toy(0)


@pytest.fixture(scope="module")
def small_train(small_dataset):
    return SplitImages(small_dataset, "train")


def state_of(block):
    return {name: p.data.copy() for name, p in block.params.items()}


class TestPairs:
    def test_default_dataset_counts(self, default_dataset):
        manifest, _ = default_dataset
        images = SplitImages(manifest, "train")
        assert len(images.ids) == 18
        assert images.genuine_pair_count() == 18 * 5 * 5
        assert steps_per_epoch(images, TrainConfig()) == 10

    def test_half_genuine(self, small_train):
        batch = sample_pairs(small_train, 90, 0.5, 0)
        assert len(batch) == 90 and batch.y_p.sum() == 45
        for a, b, y in zip(batch.ids_s, batch.ids_t, batch.y_p):
            assert (a == b) == (y == 0)

    @pytest.mark.parametrize("fraction, n_genuine", [(0.25, 2), (0.5, 4), (0.75, 6)])
    def test_genuine_fraction(self, small_train, fraction, n_genuine):
        assert (sample_pairs(small_train, 8, fraction, 1).y_p == 0).sum() == n_genuine

    def test_seeded(self, small_train):
        a, b = sample_pairs(small_train, 16, 0.5, 7), sample_pairs(small_train, 16, 0.5, 7)
        assert np.array_equal(a.x_t, b.x_t) and a.ids_s == b.ids_s

    def test_validation_batches_fixed(self, small_dataset):
        images = SplitImages(small_dataset, "val")
        first, second = validation_batches(images, FAST), validation_batches(images, FAST)
        assert all(np.array_equal(a.x_s, b.x_s) for a, b in zip(first, second))


def reference_adam(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a single array starting from zero."""
    x = np.zeros_like(grads[0])
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return x


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        p = Tensor(np.zeros(5), requires_grad=True)
        g = np.array([3.0, -0.2, 1e-3, -40.0, 0.5])
        adam_step([p], [g], AdamState.zeros([p]), TrainConfig())
        np.testing.assert_allclose(p.data, -1e-3 * np.sign(g), rtol=1e-5)

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        grads = [rng.standard_normal(6) for _ in range(12)]
        p = Tensor(np.zeros(6), requires_grad=True)
        state = AdamState.zeros([p])
        for g in grads:
            adam_step([p], [g], state, TrainConfig())
        np.testing.assert_allclose(p.data, reference_adam(grads), rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("grad", [np.zeros(4), None])
    def test_zero_gradient_is_a_no_op(self, grad):
        p = Tensor(np.arange(4.0), requires_grad=True)
        adam_step([p], [grad], AdamState.zeros([p]), TrainConfig())
        assert np.array_equal(p.data, np.arange(4.0))

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(RuntimeError):
            adam_step([p], [np.zeros(4)], AdamState.zeros([p]), TrainConfig())


class TestConfig:
    @pytest.mark.parametrize(
        "field, value",
        [("lr", -1e-3), ("lr", float("nan")), ("epochs", 0), ("batch_size", 1), ("supervision", "triplet"),
         ("genuine_fraction", 1.0), ("margin", -1.0), ("beta1", 1.0)],
    )
    def test_rejected(self, field, value):
        with pytest.raises(ConfigError):
            TrainConfig(**{field: value}).validate()


@pytest.fixture(scope="module")
def trained(small_dataset, backbone, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    pdt = PdtBlock.init(seed=0)
    before = backbone.checksum()
    report = train(pdt, backbone, small_dataset, FAST, out)
    return pdt, report, out, before


class TestTrain:
    def test_backbone_untouched(self, trained, backbone):
        _, _, _, before = trained
        assert backbone.checksum() == before
        assert all(p.grad is None for p in backbone.parameters())

    def test_report_shape(self, trained):
        _, report, out, _ = trained
        assert len(report.train_losses) == len(report.val_losses) == FAST.epochs
        assert report.best_val_loss == min(report.val_losses)
        lines = (out / RUN_LOG_NAME).read_text().splitlines()
        assert [int(line.split()[0]) for line in lines] == [1, 2]
        assert float(lines[0].split()[2]) == report.val_losses[0]

    def test_best_checkpoint_reproduces_val_loss(self, trained, small_dataset, backbone):
        pdt, report, out, _ = trained
        loaded = PdtBlock(pdt.config, {k: Tensor(v) for k, v in container_read(out / CHECKPOINT_NAME).items()})
        batches = validation_batches(SplitImages(small_dataset, "val"), FAST)
        assert validation_loss(loaded, backbone, batches, FAST) == report.best_val_loss
        assert validation_loss(pdt, backbone, batches, FAST) == report.best_val_loss

    def test_repeat_is_bit_exact(self, trained, small_dataset, backbone, tmp_path):
        _, _, out, _ = trained
        pdt = PdtBlock.init(seed=0)
        train(pdt, backbone, small_dataset, FAST, tmp_path)
        assert (tmp_path / RUN_LOG_NAME).read_bytes() == (out / RUN_LOG_NAME).read_bytes()
        assert (tmp_path / CHECKPOINT_NAME).read_bytes() == (out / CHECKPOINT_NAME).read_bytes()

    def test_zero_lr_keeps_init(self, small_dataset, backbone):
        pdt = PdtBlock.init(seed=4)
        before = state_of(pdt)
        train(pdt, backbone, small_dataset, TrainConfig(lr=0.0, epochs=1, batch_size=8))
        assert all(np.array_equal(before[k], p.data) for k, p in pdt.params.items())

    def test_non_finite_loss_aborts(self, small_dataset, backbone):
        pdt = PdtBlock.init(seed=0)
        pdt.params["project.bias"].data[:] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train(pdt, backbone, small_dataset, FAST)
        assert (info.value.epoch, info.value.batch) == (1, 1)
        assert math.isnan(info.value.history[-1])


@pytest.mark.parametrize("supervision", SUPERVISIONS)
def test_one_step_per_supervision(supervision, small_train, backbone):
    cfg = TrainConfig(supervision=supervision, batch_size=6)
    pdt = PdtBlock.init(seed=1)
    batch = sample_pairs(small_train, cfg.batch_size, cfg.genuine_fraction, 0)
    loss = batch_loss(pdt, backbone, batch, cfg)
    loss.backward()
    assert math.isfinite(loss.item())
    assert all(p.grad is not None and np.all(np.isfinite(p.grad)) for p in pdt.parameters())
    assert all(p.grad is None for p in backbone.parameters())
