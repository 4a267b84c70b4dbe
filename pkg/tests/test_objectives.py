import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gradient_report
from twinvit import objectives as O
from twinvit import tensor as T
from twinvit.errors import NumericError, ParameterError, ShapeError
from twinvit.objectives import LossConfig, TeacherStudentPair
from twinvit.tensor import Tensor


def bt_pipeline(lam=0.005):
    return lambda p: O.barlow_twins_loss(
        O.cross_correlation(T.batch_norm_columns(p[0]), T.batch_norm_columns(p[1])), lam)


def dino_pipeline(teacher, center, tau_s=0.1, tau_t=0.04):
    """Two student views against two teacher views, K taken from the inputs."""

    def fn(p):
        logits = p[0]
        b = logits.shape[0] // 2
        p_s, p_t = O.dino_distributions(logits, teacher, center, tau_s, tau_t)
        return O.dino_loss([p_s[0:b], p_s[b:2 * b]], [p_t[0:b], p_t[b:2 * b]])

    return fn


class TestCrossCorrelation:
    def test_perfectly_correlated_columns(self):
        z = Tensor([[1.0, 1.0], [-1.0, -1.0]])
        np.testing.assert_array_equal(O.cross_correlation(z, z).data, np.ones((2, 2)))

    def test_negation_is_linear(self, rng):
        z = rng.normal(size=(5, 3))
        c = O.cross_correlation(Tensor(z), Tensor(z)).data
        np.testing.assert_allclose(O.cross_correlation(Tensor(z), Tensor(-z)).data, -c, rtol=1e-6)

    def test_orthogonal_columns(self):
        a = Tensor([[1.0], [1.0], [-1.0], [-1.0]])
        b = Tensor([[1.0], [-1.0], [1.0], [-1.0]])
        np.testing.assert_array_equal(O.cross_correlation(a, b).data, [[0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            O.cross_correlation(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 2))))

    def test_entries_bounded_for_normalized_inputs(self, rng):
        za = T.batch_norm_columns(Tensor(rng.normal(size=(16, 6))))
        zb = T.batch_norm_columns(Tensor(rng.normal(size=(16, 6))))
        assert np.abs(O.cross_correlation(za, zb).data).max() <= 1 + 1e-5


class TestBarlowTwinsLoss:
    def test_identity_is_zero(self):
        assert float(O.barlow_twins_loss(Tensor(np.eye(5)), 0.005).data) == 0.0

    def test_all_ones(self):
        assert abs(float(O.barlow_twins_loss(Tensor(np.ones((2, 2))), 0.005).data) - 0.01) <= 1e-6

    def test_zero_matrix_gives_d(self):
        assert float(O.barlow_twins_loss(Tensor(np.zeros((7, 7))), 0.005).data) == 7.0

    def test_rejects_rectangular(self):
        with pytest.raises(ShapeError):
            O.barlow_twins_loss(Tensor(np.zeros((2, 3))), 0.005)

    def test_random_init_is_near_d(self, rng):
        d, n = 128, 64
        loss = float(O.bt_loss_from_embeddings(Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(n, d))),
                                               0.005).data)
        assert 0.5 * d <= loss <= 1.5 * d

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_column_permutation_invariance(self, seed):
        gen = np.random.default_rng(seed)
        za, zb = gen.normal(size=(6, 5)), gen.normal(size=(6, 5))
        perm = gen.permutation(5)
        with T.precision(np.float64):
            base = float(O.bt_loss_from_embeddings(Tensor(za), Tensor(zb), 0.005).data)
            permuted = float(O.bt_loss_from_embeddings(Tensor(za[:, perm]), Tensor(zb[:, perm]), 0.005).data)
        assert permuted == pytest.approx(base, rel=1e-10, abs=1e-12)

    def test_pipeline_gradient(self, rng):
        report = gradient_report(bt_pipeline(), [rng.normal(size=(4, 6)), rng.normal(size=(4, 6))])
        assert report.passes()


class TestDinoDistributions:
    def test_equal_logits_uniform(self):
        p_s, p_t = O.dino_distributions(Tensor(np.zeros((2, 4))), np.zeros((2, 4)), np.zeros(4), 0.1, 0.04)
        np.testing.assert_allclose(p_s.data, 0.25)
        np.testing.assert_allclose(p_t, 0.25)

    def test_center_equal_to_logits_is_uniform(self, rng):
        logits = rng.normal(size=(1, 6))
        _, p_t = O.dino_distributions(Tensor(np.zeros((1, 6))), logits, logits[0], 0.1, 0.04)
        np.testing.assert_allclose(p_t, 1 / 6, rtol=1e-6)

    def test_teacher_sharper(self):
        p_s, p_t = O.dino_distributions(Tensor([[1.0, 0.0]]), np.array([[1.0, 0.0]]), np.zeros(2), 0.1, 0.04)
        expected_s = 1 / (1 + math.exp(-10))
        expected_t = 1 / (1 + math.exp(-25))
        assert p_s.data.max() == pytest.approx(expected_s, rel=1e-6)
        assert p_t.max() == pytest.approx(expected_t, rel=1e-6)
        assert p_t.max() > p_s.data.max()

    def test_teacher_is_detached(self):
        teacher = T.parameter(np.ones((1, 3)))
        p_s, p_t = O.dino_distributions(T.parameter(np.zeros((1, 3))), teacher, np.zeros(3), 0.1, 0.04)
        assert isinstance(p_t, np.ndarray)

    def test_rejects_bad_temperature(self):
        with pytest.raises(ParameterError):
            O.dino_distributions(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), np.zeros(2), 0.0, 0.04)


class TestDinoLoss:
    @pytest.mark.parametrize("k", [2, 8, 256])
    def test_one_hot_teacher_uniform_student(self, k):
        p_t = np.eye(k)[[0]]
        p_s = Tensor(np.full((1, k), 1 / k))
        assert abs(float(O.dino_loss([p_s], [p_t], skip_same_view=False).data) - math.log(k)) <= 1e-6

    def test_uniform_both(self):
        k = 10
        u = np.full((3, k), 1 / k)
        assert float(O.dino_loss([Tensor(u)], [u], skip_same_view=False).data) == pytest.approx(math.log(k), abs=1e-6)

    def test_two_class_closed_form(self):
        loss = O.dino_loss([Tensor([[0.75, 0.25]])], [np.array([[1.0, 0.0]])], skip_same_view=False)
        assert float(loss.data) == pytest.approx(-math.log(0.75), abs=1e-6)

    def test_same_view_pairs_are_skipped(self):
        # Student view 0 matches teacher view 0 perfectly but that pair is excluded.
        t0, t1 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
        s0, s1 = Tensor([[0.5, 0.5]]), Tensor([[0.25, 0.75]])
        loss = float(O.dino_loss([s0, s1], [t0, t1]).data)
        expected = (-math.log(0.25) - math.log(0.5)) / 2
        assert loss == pytest.approx(expected, rel=1e-6)

    def test_no_pairs(self):
        with pytest.raises(ShapeError):
            O.dino_loss([Tensor([[1.0]])], [np.array([[1.0]])])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 12))
    def test_gibbs_inequality(self, seed, k):
        gen = np.random.default_rng(seed)
        p_t = gen.dirichlet(np.ones(k), size=3)
        p_s = gen.dirichlet(np.ones(k), size=3)
        with T.precision(np.float64):
            ce = float(O.dino_loss([Tensor(p_s)], [p_t], skip_same_view=False).data)
        entropy = float(-(p_t * np.log(p_t)).sum(axis=1).mean())
        assert ce >= entropy - 1e-9

    def test_pipeline_gradient(self, rng):
        k = 8
        teacher = rng.normal(size=(4, k))
        report = gradient_report(dino_pipeline(teacher, rng.normal(size=k) * 0.1), [rng.normal(size=(4, k))])
        assert report.passes()


class TestHybrid:
    def test_magnitudes_at_training_scale(self):
        out = float(O.hybrid_loss(384.425, 2.297, LossConfig()).data)
        assert out == pytest.approx(6.141, abs=5e-4)

    def test_alpha_zero(self):
        cfg = LossConfig(alpha=0.0, bt_scale=1.0)
        assert float(O.hybrid_loss(3.5, 2.0, cfg).data) == np.float32(3.5)

    def test_zero_bt(self):
        assert float(O.hybrid_loss(0.0, 2.5, LossConfig(alpha=0.4)).data) == float(np.float32(2.5) * np.float32(0.4))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            O.hybrid_loss(float("nan"), 1.0, LossConfig())

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 1e4, width=32), st.floats(0, 20, width=32),
           st.floats(2.0 ** -10, 1, width=32), st.floats(0, 2, width=32))
    def test_bitwise_identity(self, l_bt, l_dino, scale, alpha):
        cfg = LossConfig(bt_scale=scale, alpha=alpha)
        expected = np.float32(l_bt) * np.float32(scale) + np.float32(l_dino) * np.float32(alpha)
        out = O.hybrid_loss(Tensor(np.float32(l_bt)), Tensor(np.float32(l_dino)), cfg).data
        assert out.tobytes() == np.float32(expected).tobytes()


def _pair():
    student = {"backbone.w": T.parameter(np.ones((2, 2))), "dino_head.last.weight": T.parameter(np.ones((3, 4)))}
    pair = TeacherStudentPair.from_student(student)
    for t in pair.teacher.values():
        t.data[...] = 0
    return pair


class TestEma:
    def test_keep(self):
        pair = _pair()
        O.ema_update(pair, 1.0)
        assert all((t.data == 0).all() for t in pair.teacher.values())

    def test_copy(self):
        pair = _pair()
        O.ema_update(pair, 0.0)
        assert all((t.data == 1).all() for t in pair.teacher.values())

    def test_default_momentum_step(self):
        pair = _pair()
        O.ema_update(pair, 0.996)
        for t in pair.teacher.values():
            np.testing.assert_allclose(t.data, 0.004, rtol=1e-5)

    def test_structural_mismatch(self):
        pair = _pair()
        pair.student["backbone.w"] = T.parameter(np.ones(3))
        with pytest.raises(ShapeError):
            O.ema_update(pair, 0.9)

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            O.ema_update(_pair(), 1.5)

    def test_center_size_follows_head(self):
        assert _pair().center.shape == (4,)


class TestCenter:
    def test_keep(self, rng):
        c = rng.normal(size=5).astype(np.float32)
        np.testing.assert_array_equal(O.update_center(c, rng.normal(size=(3, 5)), 1.0), c)

    def test_replace_with_single_row(self):
        row = np.array([[1.5, -2.0, 0.25]], dtype=np.float32)
        np.testing.assert_array_equal(O.update_center(np.zeros(3), row, 0.0), row[0])

    def test_geometric_convergence(self, rng):
        mu = rng.normal(size=6)
        c0 = rng.normal(size=6)
        c = c0.astype(np.float32)
        m = 0.9
        for _ in range(100):
            batch = mu + rng.normal(size=(4, 6))
            batch -= batch.mean(axis=0) - mu  # every batch has row mean exactly mu
            c = O.update_center(c, batch, m)
        np.testing.assert_allclose(c, mu + m ** 100 * (c0 - mu), atol=1e-5)

    def test_rejects_momentum(self):
        with pytest.raises(ParameterError):
            O.update_center(np.zeros(2), np.zeros((1, 2)), -0.1)


class TestSchedules:
    def test_momentum_endpoints(self):
        assert O.teacher_momentum(0, 100, 0.996) == pytest.approx(0.996)
        assert O.teacher_momentum(99, 100, 0.996) == pytest.approx(1.0)

    def test_momentum_monotone(self):
        values = [O.teacher_momentum(s, 50, 0.99) for s in range(50)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_temperature_warmup(self):
        cfg = LossConfig(tau_t=0.04, tau_t_warmup=0.02, tau_t_warmup_fraction=0.1)
        assert O.teacher_temperature(0, 100, cfg) == pytest.approx(0.02)
        assert O.teacher_temperature(5, 100, cfg) == pytest.approx(0.03)
        assert O.teacher_temperature(10, 100, cfg) == 0.04
        assert O.teacher_temperature(7, 100, LossConfig()) == 0.04


class TestHeads:
    def test_output_dims(self, rng):
        cfg = LossConfig()
        x = Tensor(rng.normal(size=(3, 16)))
        assert O.bt_head(O.init_bt_head(16, cfg.bt_dim, 0), x).shape == (3, cfg.bt_dim)
        assert O.dino_head(O.init_dino_head(16, cfg, 0), x).shape == (3, cfg.dino_out_dim)

    def test_dino_logits_are_cosines(self, rng):
        params = O.init_dino_head(16, LossConfig(), 0)
        params["dino_head.last.weight"].data *= 7.0
        out = O.dino_head(params, Tensor(rng.normal(size=(5, 16)))).data
        assert np.abs(out).max() <= 1 + 1e-5

    def test_config_validation(self):
        from twinvit.errors import ConfigError
        with pytest.raises(ConfigError):
            LossConfig(tau_t=0.2, tau_s=0.1)
        with pytest.raises(ConfigError):
            LossConfig(bt_scale=0.0)
