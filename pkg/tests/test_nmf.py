import numpy as np
import pytest
from numpy.testing import assert_allclose

import oracles
from rrrlearn import nmf
from rrrlearn.graph import HyperParams
from rrrlearn.kernels import DegenerateBilinearError


def random_state(seed, n_items=3, n=4, m=5):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 1.0, size=(n_items, n, m))
    w = rng.uniform(0.05, 1.0, size=(n_items, n, m))
    y = rng.uniform(0.1, 2.0, size=(n_items, m))
    return x, w, y


class TestGenerators:
    def test_ledm_values(self):
        y = nmf.gen_ledm(6)
        assert y[0, 0] == 0.0
        assert y[0, 5] == 1.0
        assert y[0, 1] == pytest.approx(0.04, abs=1e-15)
        assert_allclose(y, y.T)

    def test_ledm_ordinary_rank_three(self):
        for m in (3, 6, 9, 12):
            assert np.linalg.matrix_rank(nmf.gen_ledm(m)) == 3

    def test_ledm_rejects_tiny(self):
        with pytest.raises(ValueError):
            nmf.gen_ledm(1)

    def test_montage_shape_and_range(self):
        imgs = nmf.gen_montage(8, seed=5)
        assert imgs.shape == (8, 1600)
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0

    def test_montage_deterministic(self):
        a = nmf.gen_montage(6, seed=9)
        b = nmf.gen_montage(6, seed=9)
        assert np.array_equal(a, b)
        c = nmf.gen_montage(6, seed=10)
        assert not np.array_equal(a, c)

    def test_montage_quadrants_are_glyphs(self):
        glyphs = list(nmf.glyph_bitmaps().values())
        imgs = nmf.gen_montage(4, seed=1).reshape(4, 40, 40)
        for img in imgs:
            for r in (0, 20):
                for c in (0, 20):
                    quad = img[r:r + 20, c:c + 20]
                    assert any(np.array_equal(quad, g) for g in glyphs)
                    assert quad.sum() > 0  # never a blank

    def test_glyphs_distinct(self):
        glyphs = nmf.glyph_bitmaps()
        keys = list(glyphs)
        for a in range(len(keys)):
            for b in range(a + 1, len(keys)):
                assert not np.array_equal(glyphs[keys[a]], glyphs[keys[b]])


class TestEncoder:
    def test_orthonormal_columns_recover_coefficients(self):
        rng = np.random.default_rng(2)
        q, _ = np.linalg.qr(rng.standard_normal((7, 3)))
        w_a = q.T  # three code nodes, orthonormal rows
        coeff = np.array([0.5, 1.2, 0.1])
        y = q @ coeff
        e = nmf.pseudo_inverse_encoder(w_a)
        assert_allclose(nmf.encode(e, y), coeff, atol=1e-12)

    def test_zero_maps_to_zero(self):
        w_a = np.random.default_rng(3).uniform(0.1, 1, size=(2, 5))
        e = nmf.pseudo_inverse_encoder(w_a)
        assert_allclose(nmf.encode(e, np.zeros(5)), 0.0)

    def test_matches_least_squares_oracle(self):
        rng = np.random.default_rng(4)
        w_a = rng.uniform(0.0, 1.0, size=(4, 9))
        y = rng.standard_normal(9)
        codes = nmf.encode(nmf.pseudo_inverse_encoder(w_a), y)
        ls = np.linalg.lstsq(w_a.T, y, rcond=None)[0]
        assert_allclose(codes, np.maximum(ls, 0.0), atol=1e-10)

    def test_rank_deficient_uses_ridge(self):
        w_a = np.ones((3, 4))  # rank one
        e = nmf.pseudo_inverse_encoder(w_a)
        assert np.isfinite(e).all()


class TestProjections:
    def test_a_consensus_mean(self):
        # one item, one code node, two outgoing edges valued 1 and 3
        x = np.array([[[1.0, 3.0]]])
        w = np.array([[[0.5, 0.5]]])
        xp, wp, xa, wa = nmf.project_A_nmf(x, w, omega=1.0)
        assert_allclose(xp, [[[2.0, 2.0]]])
        assert xa[0, 0] == 2.0

    def test_a_feasible_is_identity(self):
        x, w, _ = random_state(11)
        _, _, xa, wa = nmf.project_A_nmf(x, w, omega=2.0)
        xf = np.repeat(xa[:, :, None], x.shape[2], axis=2)
        wf = np.broadcast_to(wa, w.shape).copy()
        xp, wp, _, _ = nmf.project_A_nmf(xf, wf, omega=2.0)
        assert_allclose(xp, xf, atol=1e-12)
        assert_allclose(wp, wf, atol=1e-12)

    def test_a_constraints_satisfied(self):
        x, w, _ = random_state(12)
        x[0, 1, 2] = -4.0  # force a negative consensus candidate
        xp, wp, xa, wa = nmf.project_A_nmf(x, w, omega=1.5)
        assert np.all(xa >= 0.0)
        assert np.all(wa >= 0.0)
        assert_allclose(np.linalg.norm(wa, axis=1), 1.5, atol=1e-9)
        assert np.ptp(xp, axis=2).max() == 0.0
        assert np.ptp(wp, axis=0).max() == 0.0

    def test_b_feasible_is_identity(self):
        rng = np.random.default_rng(13)
        x, w, _ = random_state(13)
        y = np.einsum("kij,kij->kj", x, w)
        xb, wb = nmf.project_B_nmf(x, w, y)
        assert np.array_equal(xb, x)
        assert np.array_equal(wb, w)

    def test_b_satisfies_data_constraint(self):
        x, w, y = random_state(14)
        xb, wb = nmf.project_B_nmf(x, w, y)
        dots = np.einsum("kij,kij->kj", xb, wb)
        assert_allclose(dots, y, atol=1e-8)

    def test_b_block_matches_penalty_oracle(self):
        x, w, y = random_state(15, n_items=1, n=5, m=2)
        xb, wb = nmf.project_B_nmf(x, w, y)
        xo, wo, _ = oracles.oracle_bilinear(x[0, :, 0], w[0, :, 0],
                                            y=y[0, 0], omega=1.0, g2=np.inf)
        d_kernel = np.sum((xb[0, :, 0] - x[0, :, 0]) ** 2) + \
            np.sum((wb[0, :, 0] - w[0, :, 0]) ** 2)
        d_oracle = np.sum((xo - x[0, :, 0]) ** 2) + np.sum((wo - w[0, :, 0]) ** 2)
        assert d_kernel <= d_oracle * (1 + 1e-6)
        assert_allclose(xb[0, :, 0], xo, atol=1e-6)

    def test_b_blocks_independent(self):
        x, w, y = random_state(16)
        xb, wb = nmf.project_B_nmf(x, w, y)
        perm = [2, 0, 1]
        xb2, wb2 = nmf.project_B_nmf(x[perm], w[perm], y[perm])
        assert_allclose(xb2, xb[perm], atol=0)
        assert_allclose(wb2, wb[perm], atol=0)


class TestRrrErr:
    def test_zero_when_equal(self):
        x, w, _ = random_state(17)
        assert nmf.rrr_err_nmf((x, w), (x, w)) == 0.0

    def test_hand_example(self):
        # one item, one edge, unit discrepancies in both x and w
        xa = np.array([[[1.0]]])
        wa = np.array([[[1.0]]])
        xb = np.array([[[2.0]]])
        wb = np.array([[[0.0]]])
        assert nmf.rrr_err_nmf((xa, wa), (xb, wb)) == pytest.approx(np.sqrt(2))

    def test_matches_recomputation(self):
        x, w, _ = random_state(18)
        x2, w2, _ = random_state(19)
        err = nmf.rrr_err_nmf((x, w), (x2, w2))
        ref = np.sqrt((np.sum((x - x2) ** 2) + np.sum((w - w2) ** 2)) / x.shape[0])
        assert err == pytest.approx(ref, rel=1e-12)


class TestInitBatch:
    def _problem(self, seed=20, n_items=6, n=3, m=4):
        rng = np.random.default_rng(seed)
        data = rng.uniform(0.0, 1.0, size=(n_items, m))
        return nmf.NmfProblem(data, n, HyperParams(omega=1.5, batch_size=n_items))

    def test_first_batch_row_norms(self):
        prob = self._problem()
        rng = np.random.default_rng(0)
        x, w, w_a = nmf.init_batch_nmf(prob, None, prob.data, rng)
        assert_allclose(np.linalg.norm(w_a, axis=1), 1.5, atol=1e-12)
        assert np.all(w_a >= 0.0)

    def test_a_projection_near_identity_after_init(self):
        prob = self._problem()
        rng = np.random.default_rng(0)
        x, w, w_a = nmf.init_batch_nmf(prob, None, prob.data, rng)
        assert np.ptp(x, axis=2).max() == 0.0
        assert np.ptp(w, axis=0).max() == 0.0
        xp, wp, _, _ = nmf.project_A_nmf(x, w, prob.hyper.omega)
        assert_allclose(xp, x, atol=1e-12)
        assert_allclose(wp, w, atol=1e-12)

    def test_warm_start_reuses_consensus(self):
        prob = self._problem()
        rng = np.random.default_rng(0)
        prev = np.random.default_rng(1).uniform(0.1, 1, size=(3, 4))
        x, w, w_a = nmf.init_batch_nmf(prob, prev, prob.data, rng)
        assert np.array_equal(w_a, prev)
        assert np.array_equal(w[0], prev)

    def test_data_validation(self):
        with pytest.raises(ValueError):
            nmf.NmfProblem(np.array([[1.0, -0.1]]), 1, HyperParams())


class TestReconErr:
    def test_exact_factorization_is_zero(self):
        rng = np.random.default_rng(21)
        w_a = rng.uniform(0.1, 1.0, size=(3, 6))
        w_a /= np.linalg.norm(w_a, axis=1, keepdims=True)
        codes = rng.uniform(0.0, 2.0, size=(3, 10))
        data = (w_a.T @ codes).T
        prob = nmf.NmfProblem(data, 3, HyperParams())
        assert nmf.recon_err(prob, w_a) < 1e-10

    def test_rank_one_instance(self):
        rng = np.random.default_rng(22)
        wvec = rng.uniform(0.2, 1.0, size=5)
        xvec = rng.uniform(0.2, 1.0, size=8)
        data = np.outer(xvec, wvec)
        prob = nmf.NmfProblem(data, 1, HyperParams(omega=0.7))
        w_a = (0.7 * wvec / np.linalg.norm(wvec))[None, :]
        assert nmf.recon_err(prob, w_a) < 1e-10

    def test_direct_codes_bypass_encoder(self):
        # A rank-deficient w_a defeats any relu(linear) encoder even though
        # the factorization itself is exact; supplied codes must be used
        # verbatim in that case.
        w_a = np.array([[0.6, 0.0, 0.0],
                        [0.0, 0.6, 0.0],
                        [0.3, 0.3, 0.0]])
        w_a[2] *= 0.6 / np.linalg.norm(w_a[2])
        codes = np.array([[1.0, 0.0, 0.5],
                          [0.0, 2.0, 0.5],
                          [1.0, 1.0, 0.0]])
        data = codes @ w_a
        prob = nmf.NmfProblem(data, 3, HyperParams())
        assert nmf.recon_err(prob, w_a, codes) < 1e-12
        assert nmf.recon_err(prob, w_a) > nmf.recon_err(prob, w_a, codes)


class TestFusedKernel:
    def _reference_step(self, x, w, y, omega, beta):
        pax, paw, xa, wa = nmf.project_A_nmf(x, w, omega)
        pbx, pbw = nmf.project_B_nmf(2 * pax - x, 2 * paw - w, y)
        x1 = x + beta * (pbx - pax)
        w1 = w + beta * (pbw - paw)
        err = nmf.rrr_err_nmf((pax, paw), (pbx, pbw))
        return x1, w1, err

    def test_single_iteration_matches_reference(self):
        x, w, y = random_state(23)
        hp = HyperParams(beta=0.7, omega=1.3, rrr_iter=1, tol=0.0)
        xr, wr, err_ref = self._reference_step(x.copy(), w.copy(), y, 1.3, 0.7)
        xf, wf = x.copy(), w.copy()
        logbook = nmf.run_nmf_batch(xf, wf, y, hp)
        assert logbook.iter_count == 1
        assert_allclose(xf, xr, atol=1e-12)
        assert_allclose(wf, wr, atol=1e-12)
        assert logbook.errs[0] == pytest.approx(err_ref, rel=1e-12)

    def test_many_iterations_match_reference(self):
        x, w, y = random_state(24, n_items=2, n=3, m=3)
        hp = HyperParams(beta=0.5, omega=1.0, rrr_iter=20, tol=0.0)
        xr, wr = x.copy(), w.copy()
        for _ in range(20):
            xr, wr, _ = self._reference_step(xr, wr, y, 1.0, 0.5)
        xf, wf = x.copy(), w.copy()
        nmf.run_nmf_batch(xf, wf, y, hp)
        assert_allclose(xf, xr, atol=1e-9)
        assert_allclose(wf, wr, atol=1e-9)

    def test_tol_inf_stops_after_one(self):
        x, w, y = random_state(25)
        hp = HyperParams(rrr_iter=50, tol=np.inf)
        logbook = nmf.run_nmf_batch(x, w, y, hp)
        assert logbook.iter_count == 1

    def test_work_accounting(self):
        x, w, y = random_state(26)
        hp = HyperParams(rrr_iter=7, tol=0.0)
        logbook = nmf.run_nmf_batch(x, w, y, hp)
        n_items, n, m = x.shape
        assert logbook.work_per_iter == n_items * n * m
        assert logbook.gwm_counter == 1e-9 * 7 * n_items * n * m

    def test_degenerate_block_raises(self):
        # x = w everywhere with omega matched so the reflected block is
        # exactly degenerate
        c = 0.8
        x = np.full((1, 1, 1), c)
        w = np.full((1, 1, 1), c)
        y = np.array([[0.1]])
        hp = HyperParams(omega=c, rrr_iter=5)
        with pytest.raises(DegenerateBilinearError):
            nmf.run_nmf_batch(x, w, y, hp)


class TestTrainNmf:
    def test_deterministic_for_seed(self):
        data = nmf.gen_ledm(5)
        hp = HyperParams(beta=0.3, omega=0.6, rrr_iter=200, tol=1e-7,
                         batch_size=5, rng_seed=42)
        w1, m1 = nmf.train_nmf(nmf.NmfProblem(data, 4, hp), epochs=2)
        w2, m2 = nmf.train_nmf(nmf.NmfProblem(data, 4, hp), epochs=2)
        assert np.array_equal(w1, w2)
        assert [r.recon_err for r in m1] == [r.recon_err for r in m2]
        assert [r.gwms for r in m1] == [r.gwms for r in m2]

    def test_gwms_accounting_across_batches(self):
        rng = np.random.default_rng(27)
        data = rng.uniform(0, 1, size=(7, 4))  # uneven final batch of 3
        hp = HyperParams(rrr_iter=3, tol=0.0, batch_size=4, rng_seed=1)
        prob = nmf.NmfProblem(data, 2, hp)
        _, metrics = nmf.train_nmf(prob, epochs=1)
        expected = 1e-9 * (3 * 4 * 8 + 3 * 3 * 8)
        assert metrics[0].gwms == pytest.approx(expected, rel=1e-15)
        assert metrics[0].iter_count == 6

    def test_metrics_monotone_epochs(self):
        data = nmf.gen_ledm(5)
        hp = HyperParams(beta=0.3, omega=0.6, rrr_iter=50, batch_size=5,
                         rng_seed=3)
        _, metrics = nmf.train_nmf(nmf.NmfProblem(data, 4, hp), epochs=3)
        assert [r.epoch for r in metrics] == [1, 2, 3]
        assert all(np.isfinite(r.recon_err) for r in metrics)
