import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdt_hfr.errors import ConfigError, NumericDegenerateError, ValidationError
from pdt_hfr.gradcheck import check_gradients
from pdt_hfr.losses import (
    ContrastiveConfig,
    MmdConfig,
    composite_unpaired_loss,
    contrastive_loss,
    contrastive_per_pair,
    median_bandwidth,
    mmd_loss,
)
from pdt_hfr.tensor import Tensor

FIXED1 = MmdConfig(bandwidth_mode="fixed", fixed_sigma=1.0)


def mmd_loops(a, b, sigma=None):
    """Kernel sums written out pair by pair."""
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if sigma is None:
        pooled = np.concatenate([a, b])
        dists = [np.linalg.norm(p - q) for p, q in itertools.combinations(pooled, 2)]
        # the cross block counts each (a_i, b_j) once; within blocks count unordered pairs
        within = [np.linalg.norm(p - q) for p, q in itertools.combinations(a, 2)]
        within += [np.linalg.norm(p - q) for p, q in itertools.combinations(b, 2)]
        cross = [np.linalg.norm(p - q) for p in a for q in b]
        assert len(dists) == len(within) + len(cross)
        sigma = math.sqrt(np.median(np.square(within + cross)))
    k = lambda p, q: math.exp(-np.sum((p - q) ** 2) / (2 * sigma * sigma))  # noqa: E731
    kaa = sum(k(p, q) for p in a for q in a) / len(a) ** 2
    kbb = sum(k(p, q) for p in b for q in b) / len(b) ** 2
    kab = sum(k(p, q) for p in a for q in b) / (len(a) * len(b))
    return kaa + kbb - 2 * kab


def pair_at_distance(d, dim=4):
    e_s = np.zeros((1, dim))
    e_t = np.zeros((1, dim))
    e_t[0, 0] = d
    return Tensor(e_s), Tensor(e_t)


class TestContrastive:
    @pytest.mark.parametrize(
        "dist,label,expected",
        [(0.0, 0, 0.0), (1.0, 0, 0.5), (1.0, 1, 0.5), (2.0, 1, 0.0), (3.5, 1, 0.0), (0.5, 1, 1.125)],
    )
    def test_canonical_values(self, dist, label, expected):
        e_s, e_t = pair_at_distance(dist)
        value = contrastive_per_pair(e_s, e_t, [label], ContrastiveConfig(2.0)).data[0]
        assert value == pytest.approx(expected, abs=1e-15)

    def test_identical_genuine_is_zero(self):
        e = Tensor(np.random.default_rng(0).standard_normal((5, 8)))
        assert contrastive_loss(e, e, np.zeros(5)).item() == 0.0

    def test_batch_mean(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        y = np.array([0, 1, 0, 1, 1, 0])
        per = contrastive_per_pair(Tensor(a), Tensor(b), y).data
        assert contrastive_loss(Tensor(a), Tensor(b), y).item() == pytest.approx(per.mean(), abs=1e-15)

    @pytest.mark.parametrize("labels", [[0, 2], [0.5, 1], [-1, 0]])
    def test_rejects_non_binary_labels(self, labels):
        e = Tensor(np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            contrastive_loss(e, e, labels)

    def test_rejects_label_count(self):
        e = Tensor(np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            contrastive_loss(e, e, [0, 1, 0])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            contrastive_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), [0, 1])

    def test_negative_margin(self):
        with pytest.raises(ConfigError):
            ContrastiveConfig(-0.1).validate()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_both_sides(self, seed):
        rng = np.random.default_rng(seed)
        # keep distances away from the hinge at d = margin
        a = Tensor(rng.standard_normal((6, 4)) * 0.4, requires_grad=True)
        b = Tensor(rng.standard_normal((6, 4)) * 0.4, requires_grad=True)
        y = np.array([0, 1, 0, 1, 0, 1])
        res = check_gradients(lambda: contrastive_loss(a, b, y), {"a": a, "b": b})
        assert res.max_error < 1e-6

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (5, 3), elements=st.floats(-5, 5)),
        arrays(np.float64, (5, 3), elements=st.floats(-5, 5)),
        st.lists(st.integers(0, 1), min_size=5, max_size=5),
        st.floats(0, 4),
    )
    def test_non_negative(self, a, b, y, margin):
        per = contrastive_per_pair(Tensor(a), Tensor(b), y, ContrastiveConfig(margin)).data
        assert np.all(per >= 0)


class TestMmd:
    def test_closed_form_single_points(self):
        value = mmd_loss(Tensor([[0.0]]), Tensor([[1.0]]), FIXED1).item()
        assert abs(value - (2.0 - 2.0 * math.exp(-0.5))) < 1e-15
        assert abs(value - 0.786939) < 1e-6

    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("mode", ["fixed", "median_heuristic"])
    def test_matches_loop_oracle(self, seed, mode):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((4 + seed, 3))
        b = rng.standard_normal((3, 3)) + 0.7
        cfg = MmdConfig(bandwidth_mode=mode, fixed_sigma=1.3)
        expected = mmd_loops(a, b, 1.3 if mode == "fixed" else None)
        assert mmd_loss(Tensor(a), Tensor(b), cfg).item() == pytest.approx(expected, abs=1e-12)

    def test_identical_samples_zero(self):
        a = np.random.default_rng(3).standard_normal((6, 5))
        assert abs(mmd_loss(Tensor(a), Tensor(a[::-1].copy())).item()) < 1e-12

    def test_images_are_flattened(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(size=(3, 2, 4, 4)), rng.uniform(size=(3, 2, 4, 4))
        flat = mmd_loss(Tensor(a.reshape(3, -1)), Tensor(b.reshape(3, -1))).item()
        assert mmd_loss(Tensor(a), Tensor(b)).item() == flat

    def test_median_bandwidth_value(self):
        a = np.array([[0.0], [2.0]])
        b = np.array([[5.0], [6.0]])
        d = lambda x, y: (x - y.T) ** 2  # noqa: E731
        # distances: within 2, 1; cross 5, 6, 3, 4 -> median of squares of {1,2,3,4,5,6}
        sigma = median_bandwidth(d(a, a), d(b, b), d(a, b), d(b, a))
        assert sigma == pytest.approx(math.sqrt(12.5), abs=1e-15)

    def test_zero_median_is_degenerate(self):
        a = np.zeros((3, 2))
        with pytest.raises(NumericDegenerateError):
            mmd_loss(Tensor(a), Tensor(a))

    def test_too_few_rows_for_median(self):
        with pytest.raises(ValidationError):
            mmd_loss(Tensor([[0.0]]), Tensor([[1.0]]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            mmd_loss(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 4))), FIXED1)

    @pytest.mark.parametrize(
        "cfg",
        [MmdConfig(kernel="linear"), MmdConfig(bandwidth_mode="silverman"),
         MmdConfig(bandwidth_mode="fixed", fixed_sigma=0.0), MmdConfig(placement="both")],
    )
    def test_invalid_config(self, cfg):
        with pytest.raises(ConfigError):
            cfg.validate()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_fixed_bandwidth(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        res = check_gradients(lambda: mmd_loss(a, b, MmdConfig(bandwidth_mode="fixed", fixed_sigma=1.5)), {"a": a, "b": b})
        assert res.max_error < 1e-6

    def test_median_bandwidth_is_held_constant_in_backward(self):
        rng = np.random.default_rng(5)
        a_np, b_np = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        a = Tensor(a_np, requires_grad=True)
        mmd_loss(a, Tensor(b_np)).backward()
        sq = lambda x, y: np.sum((x[:, None] - y[None]) ** 2, axis=-1)  # noqa: E731
        sigma = median_bandwidth(sq(a_np, a_np), sq(b_np, b_np), sq(a_np, b_np), sq(b_np, a_np))
        ref = Tensor(a_np, requires_grad=True)
        mmd_loss(ref, Tensor(b_np), MmdConfig(bandwidth_mode="fixed", fixed_sigma=sigma)).backward()
        np.testing.assert_allclose(a.grad, ref.grad, rtol=0, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (4, 3), elements=st.floats(-3, 3)),
        arrays(np.float64, (3, 3), elements=st.floats(-3, 3)),
    )
    def test_symmetric_bit_exact_and_non_negative(self, a, b):
        cfg = MmdConfig(bandwidth_mode="fixed", fixed_sigma=0.8)
        ab = mmd_loss(Tensor(a), Tensor(b), cfg).item()
        ba = mmd_loss(Tensor(b), Tensor(a), cfg).item()
        assert ab == ba
        assert ab >= -1e-12

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (4, 3), elements=st.floats(-3, 3)),
        arrays(np.float64, (4, 3), elements=st.floats(-3, 3)),
        arrays(np.float64, (3,), elements=st.floats(-10, 10)),
    )
    def test_translation_invariant(self, a, b, shift):
        cfg = MmdConfig(bandwidth_mode="fixed", fixed_sigma=1.0)
        base = mmd_loss(Tensor(a), Tensor(b), cfg).item()
        moved = mmd_loss(Tensor(a + shift), Tensor(b + shift), cfg).item()
        assert moved == pytest.approx(base, abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (5, 2), elements=st.floats(-3, 3), unique=True))
    def test_median_mode_symmetric(self, a):
        b = a[::-1] * 0.5 + 1.0
        if np.all(a == a[0]):
            return
        assert mmd_loss(Tensor(a), Tensor(b)).item() == mmd_loss(Tensor(b), Tensor(a)).item()


class TestComposite:
    def setup_method(self):
        rng = np.random.default_rng(6)
        self.x_s = Tensor(rng.uniform(size=(4, 3, 5, 5)))
        self.x_t = Tensor(rng.uniform(size=(4, 3, 5, 5)))
        self.e_s = Tensor(rng.standard_normal((4, 8)))
        self.e_t = Tensor(rng.standard_normal((4, 8)))

    def loss(self, placement, e_t=None):
        e_t = self.e_t if e_t is None else e_t
        return composite_unpaired_loss(self.x_s, self.x_t, self.e_s, e_t, MmdConfig(placement=placement)).item()

    def test_ip_ignores_embeddings(self):
        assert self.loss("ip") == self.loss("ip", Tensor(self.e_t.data + 3.0))

    def test_op_ignores_pixels(self):
        assert composite_unpaired_loss(None, None, self.e_s, self.e_t, MmdConfig(placement="op")).item() == self.loss("op")

    def test_ip_op_is_plain_sum(self):
        assert self.loss("ip_op") == self.loss("ip") + self.loss("op")
