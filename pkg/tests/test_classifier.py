"""Fixed simplex-geometry prototypes and the dual-branch head."""

import numpy as np
import pytest

from ibanet import classifier as C
from ibanet import tensor as T
from ibanet.errors import ParameterError
from ibanet.gradcheck import compare_gradients
from ibanet.optim import AdamState, adam_step
from ibanet.tensor import Tape, Tensor

# equal pairwise separation for 5 classes: arccos(-1/4)
ANGLE_5 = 104.47751218592992


class TestEtfGeometry:
    @pytest.mark.parametrize("m,d", [(2, 2), (3, 3), (5, 5), (5, 8), (6, 32), (10, 64)])
    def test_gram_matches_ideal(self, m, d):
        etf = C.generate_etf(m, dim=d, seed=0)
        assert etf.V.shape == (d, m)
        assert etf.max_gram_deviation() < 1e-10

    def test_unit_columns(self):
        etf = C.generate_etf(5, dim=8, seed=3)
        np.testing.assert_allclose(np.linalg.norm(etf.V, axis=0), 1.0, atol=1e-12)

    def test_pairwise_inner_products(self):
        m = 5
        etf = C.generate_etf(m, seed=1)
        gram = etf.gram()
        off = gram[~np.eye(m, dtype=bool)]
        np.testing.assert_allclose(off, -1.0 / (m - 1), atol=1e-12)

    def test_columns_sum_to_zero_vector(self):
        # simplex prototypes are mean-centered by construction
        etf = C.generate_etf(6, dim=6, seed=0)
        np.testing.assert_allclose(etf.V.sum(axis=1), 0.0, atol=1e-10)

    def test_minimal_dimension_case(self):
        # d = M-1 is the tightest dimension where the simplex still fits
        etf = C.generate_etf(5, dim=4, seed=0)
        assert etf.V.shape == (4, 5)
        assert etf.max_gram_deviation() < 1e-10

    def test_two_classes_are_antipodal(self):
        etf = C.generate_etf(2, seed=0)
        np.testing.assert_allclose(etf.V[:, 0], -etf.V[:, 1], atol=1e-12)

    def test_dimension_below_minimum_rejected(self):
        with pytest.raises(ParameterError):
            C.generate_etf(5, dim=3)

    def test_single_class_rejected(self):
        with pytest.raises(ParameterError):
            C.generate_etf(1)

    def test_deterministic_per_seed(self):
        a = C.generate_etf(5, dim=8, seed=7)
        b = C.generate_etf(5, dim=8, seed=7)
        np.testing.assert_array_equal(a.V, b.V)
        c = C.generate_etf(5, dim=8, seed=8)
        assert not np.array_equal(a.V, c.V)

    def test_matrix_is_write_protected(self):
        etf = C.generate_etf(4, seed=0)
        with pytest.raises(ValueError):
            etf.V[0, 0] = 99.0

    def test_ideal_gram_closed_form(self):
        etf = C.generate_etf(3, seed=0)
        expected = np.array(
            [
                [1.0, -0.5, -0.5],
                [-0.5, 1.0, -0.5],
                [-0.5, -0.5, 1.0],
            ]
        )
        np.testing.assert_allclose(etf.ideal_gram(), expected, atol=1e-15)

    def test_prototype_angles_match_closed_form(self):
        etf = C.generate_etf(5, seed=0)
        cos = etf.gram()[0, 1]
        angle = np.degrees(np.arccos(cos))
        assert angle == pytest.approx(ANGLE_5, abs=1e-9)


class TestHelmertRows:
    def test_orthonormal_and_ones_free(self):
        for m in (2, 3, 5, 9):
            rows = C._helmert_rows(m)
            assert rows.shape == (m - 1, m)
            np.testing.assert_allclose(rows @ rows.T, np.eye(m - 1), atol=1e-12)
            np.testing.assert_allclose(rows @ np.ones(m), 0.0, atol=1e-12)


class TestDualBranchHead:
    def head(self, k=0.3, in_dim=16, m=5, d=None, seed=0):
        etf = C.generate_etf(m, dim=d, seed=seed)
        return C.DualBranchHead(
            np.random.default_rng(seed), in_dim, etf, k=k
        ), etf

    def test_output_shapes(self):
        head, _ = self.head()
        x = Tensor(np.random.default_rng(1).normal(size=(7, 16)))
        z, z_etf, z_fc = head(x)
        assert z.shape == (7, 5)
        assert z_etf.shape == (7, 5)
        assert z_fc.shape == (7, 5)

    def test_blend_is_linear_interpolation(self):
        head, _ = self.head(k=0.3)
        x = Tensor(np.random.default_rng(2).normal(size=(4, 16)))
        z, z_etf, z_fc = head(x)
        np.testing.assert_allclose(
            z.data, 0.3 * z_etf.data + 0.7 * z_fc.data, atol=1e-12
        )

    def test_k_zero_is_pure_learnable_branch(self):
        head, _ = self.head(k=0.0)
        x = Tensor(np.random.default_rng(3).normal(size=(4, 16)))
        z, _, z_fc = head(x)
        np.testing.assert_allclose(z.data, z_fc.data, atol=1e-12)

    def test_k_one_is_pure_geometry_branch(self):
        head, _ = self.head(k=1.0)
        x = Tensor(np.random.default_rng(4).normal(size=(4, 16)))
        z, z_etf, _ = head(x)
        np.testing.assert_allclose(z.data, z_etf.data, atol=1e-12)

    def test_k_outside_unit_interval_rejected(self):
        etf = C.generate_etf(5, seed=0)
        for bad in (-0.1, 1.01):
            with pytest.raises(ParameterError):
                C.DualBranchHead(np.random.default_rng(0), 16, etf, k=bad)

    def test_geometry_logits_bounded_by_scale(self):
        # cosine against unit prototypes, so |z_etf| <= mu
        head, _ = self.head(k=1.0)
        x = Tensor(np.random.default_rng(5).normal(size=(20, 16)) * 100)
        _, z_etf, _ = head(x)
        assert np.all(np.abs(z_etf.data) <= 1.0 + 1e-9)

    def test_geometry_branch_scale_invariant_in_feature(self):
        head, _ = self.head()
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 16))
        # zero the projector bias so scaling the feature scales the projection
        head.projector.b.data[:] = 0.0
        a = head.etf_branch(Tensor(x)).data
        b = head.etf_branch(Tensor(x * 37.5)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_mu_zero_silences_geometry_branch(self):
        head, _ = self.head(k=1.0)
        head.mu.data[()] = 0.0
        x = Tensor(np.random.default_rng(7).normal(size=(3, 16)))
        z, _, _ = head(x)
        np.testing.assert_array_equal(z.data, np.zeros((3, 5)))

    def test_feature_on_prototype_direction_scores_gram_row(self):
        head, etf = self.head(k=1.0, in_dim=5, d=5)
        # identity projector with zero bias maps the feature straight through
        head.projector.w.data[:] = np.eye(5)
        head.projector.b.data[:] = 0.0
        x = Tensor(etf.V[:, 2][None, :] * 3.0)
        _, z_etf, _ = head(x)
        np.testing.assert_allclose(z_etf.data[0], etf.gram()[2], atol=1e-10)
        assert C.predict(z_etf)[0] == 2

    def test_prototypes_not_in_params(self):
        head, _ = self.head()
        names = [n for n, _ in head.params()]
        assert names == [
            "head.projector.w",
            "head.projector.b",
            "head.fc.w",
            "head.fc.b",
            "head.mu",
        ]

    def test_prototypes_survive_optimizer_steps(self):
        head, etf = self.head()
        before = etf.V.copy()
        params = [p for _, p in head.params()]
        state = AdamState(params, lr=0.05)
        rng = np.random.default_rng(8)
        for _ in range(3):
            with Tape() as tape:
                for p in params:
                    tape.watch(p)
                z, _, _ = head(Tensor(rng.normal(size=(4, 16))))
                loss = T.reduce_mean(T.mul(z, z))
                grads = tape.gradients_for(params, tape.backward(loss))
            adam_step(state, params, grads)
        np.testing.assert_array_equal(etf.V, before)
        np.testing.assert_array_equal(head._V.data, before)

    def test_mu_is_learnable(self):
        head, _ = self.head(k=1.0)
        params = [p for _, p in head.params()]
        state = AdamState(params, lr=0.1)
        x = Tensor(np.random.default_rng(9).normal(size=(4, 16)))
        with Tape() as tape:
            for p in params:
                tape.watch(p)
            z, _, _ = head(x)
            loss = T.reduce_mean(T.mul(z, z))
            grads = tape.gradients_for(params, tape.backward(loss))
        adam_step(state, params, grads)
        assert head.mu.data != 1.0

    def test_head_gradients(self):
        head, _ = self.head(k=0.4, in_dim=6, m=4, d=4, seed=2)
        x = Tensor(np.random.default_rng(10).normal(size=(3, 6)))
        pick = Tensor(np.random.default_rng(11).normal(size=(3, 4)))
        params = [p for _, p in head.params()]

        def build():
            z, _, _ = head(x)
            return T.reduce_sum(T.mul(z, pick))

        err, _ = compare_gradients(build, params, h=1e-6)
        assert err < 1e-6


class TestBlendAndPredict:
    def test_blend_values(self):
        a = Tensor(np.array([[2.0, 0.0]]))
        b = Tensor(np.array([[0.0, 4.0]]))
        np.testing.assert_array_equal(C.blend(a, b, 0.25).data, [[0.5, 3.0]])
        np.testing.assert_array_equal(C.blend(a, b, 1.0).data, [[2.0, 0.0]])
        np.testing.assert_array_equal(C.blend(a, b, 0.0).data, [[0.0, 4.0]])

    def test_predict_rows(self):
        z = np.array([[0.1, 0.9, 0.0], [2.0, -1.0, 1.5]])
        np.testing.assert_array_equal(C.predict(z), [1, 0])

    def test_predict_tie_takes_lowest_index(self):
        z = np.array([[1.0, 1.0, 0.0], [0.5, 0.7, 0.7]])
        np.testing.assert_array_equal(C.predict(z), [0, 1])

    def test_predict_accepts_tensor(self):
        z = Tensor(np.array([[0.0, 3.0]]))
        np.testing.assert_array_equal(C.predict(z), [1])

    def test_predict_invariant_to_monotone_shift(self):
        rng = np.random.default_rng(12)
        z = rng.normal(size=(10, 5))
        np.testing.assert_array_equal(C.predict(z), C.predict(z + 100.0))
        np.testing.assert_array_equal(C.predict(z), C.predict(z * 3.0))
