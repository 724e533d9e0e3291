import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import subspace_angles
from scipy.stats import multivariate_normal

from rawspk import backend
from rawspk.corpus import Trial

from oracles import pair_llr_oracle, random_spd, sample_plda


class TestCosine:
    def test_identical(self):
        assert backend.cosine_score([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert backend.cosine_score([1.0, 0.0], [0.0, 3.0]) == 0.0

    def test_hand_value(self):
        assert backend.cosine_score([1, 2], [2, 1]) == pytest.approx(0.8, abs=1e-15)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            backend.cosine_score([0.0, 0.0], [1.0, 2.0])

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            backend.cosine_score([1.0, 2.0], [1.0, 2.0, 3.0])

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_positive_scale_invariance(self, v, s1, s2):
        a = np.array(v) + np.array([0.5, -0.25, 1.0])
        b = np.array([1.0, 2.0, -0.5])
        if np.linalg.norm(a) < 1e-3:
            return
        assert abs(backend.cosine_score(s1 * a, s2 * b) - backend.cosine_score(a, b)) < 1e-12


class TestLDA:
    def test_aligned_with_separating_axis(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((400, 2)) * [1.0, 1.0]
        labels = np.repeat([0, 1], 200)
        X[labels == 1, 0] += 4.0
        w = backend.lda_fit(X, labels, 1)[:, 0]
        angle = np.degrees(np.arccos(abs(w[0]) / np.linalg.norm(w)))
        assert angle < 5

    def test_matches_eigen_oracle(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((300, 4))
        labels = rng.integers(0, 5, 300)
        X += rng.standard_normal((5, 4))[labels] * 2
        W = backend.lda_fit(X, labels, 2)
        # oracle: eigenvectors of Sw^-1 Sb via a plain (non-symmetric) solver
        mu = X.mean(0)
        Sw = np.zeros((4, 4))
        Sb = np.zeros((4, 4))
        for k in range(5):
            Xk = X[labels == k]
            mk = Xk.mean(0)
            Sw += (Xk - mk).T @ (Xk - mk)
            Sb += len(Xk) * np.outer(mk - mu, mk - mu)
        Sw /= len(X)
        Sb /= len(X)
        Sw += 1e-6 * np.trace(Sw) / 4 * np.eye(4)
        vals, vecs = np.linalg.eig(np.linalg.solve(Sw, Sb))
        top = vecs[:, np.argsort(vals.real)[::-1][:2]].real
        assert np.max(subspace_angles(W, top)) < 1e-6

    def test_refit_is_idempotent(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 6, 400)
        X = rng.standard_normal((400, 5)) + 3 * rng.standard_normal((6, 5))[labels]
        W1 = backend.lda_fit(X, labels, 3)
        W2 = backend.lda_fit(X, labels, 3)
        assert np.max(subspace_angles(W1, W2)) < 1e-6

    def test_out_dim_too_large(self):
        X = np.random.default_rng(0).standard_normal((20, 5))
        with pytest.raises(ValueError, match="out_dim"):
            backend.lda_fit(X, np.repeat([0, 1], 10), 2)

    def test_identical_means_degenerate(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        with pytest.raises(backend.DegenerateInputError):
            backend.lda_fit(X, [0, 0, 1, 1], 1)


class TestPreprocess:
    @pytest.fixture
    def fitted(self):
        rng = np.random.default_rng(3)
        labels = np.repeat(np.arange(12), 8)
        X = rng.standard_normal((96, 10)) + 2 * rng.standard_normal((12, 10))[labels]
        return X, labels, backend.fit_preprocessor(X, labels, 5)

    def test_unit_norm(self, fitted):
        X, _, pre = fitted
        Z = pre.transform(X)
        np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-12)

    def test_whitened_covariance_is_identity(self, fitted):
        X, _, pre = fitted
        Z = pre.transform(X, length_norm=False)
        cov = np.cov(Z.T, bias=True)
        np.testing.assert_allclose(cov, np.eye(5), atol=1e-6)

    def test_mean_input_degenerate(self, fitted):
        X, _, pre = fitted
        with pytest.raises(backend.DegenerateInputError):
            pre.transform(X.mean(axis=0))

    def test_unfitted_backend(self):
        with pytest.raises(backend.NotFittedError):
            backend.PLDABackend().preprocess(np.ones(3))


class TestPLDAFit:
    def test_total_covariance_is_sample_covariance(self):
        # 50 speakers x 20 utterances: the fit reaches the ML total covariance.
        # The generating value itself is 20-40% away at this size (sampling noise).
        rng = np.random.default_rng(4)
        F = rng.standard_normal((8, 4))
        X, labels = sample_plda(rng, F, random_spd(rng, 8, 0.5), 50, 20)
        model, _ = backend.plda_fit(X, labels, 4, em_iters=50)
        est = model.F @ model.F.T + model.Sigma
        sample = np.cov(X.T, bias=True)
        assert np.linalg.norm(est - sample) / np.linalg.norm(sample) < 0.01

    def test_recovers_generating_covariance(self):
        rng = np.random.default_rng(4)
        F = rng.standard_normal((8, 4))
        Sigma = random_spd(rng, 8, 0.5)
        X, labels = sample_plda(rng, F, Sigma, 2000, 20)
        model, _ = backend.plda_fit(X, labels, 4, em_iters=50)
        true = F @ F.T + Sigma
        est = model.F @ model.F.T + model.Sigma
        assert np.linalg.norm(est - true) / np.linalg.norm(true) < 0.10
        assert np.linalg.norm(model.Sigma - Sigma) / np.linalg.norm(Sigma) < 0.10

    def test_step_from_truth_does_not_decrease(self):
        rng = np.random.default_rng(5)
        F = rng.standard_normal((6, 2))
        Sigma = random_spd(rng, 6)
        X, labels = sample_plda(rng, F, Sigma, 30, 5)
        # the fit estimates mu as the sample mean; start EM at the true (F, Sigma)
        _, lls = backend.plda_fit(X, labels, 2, em_iters=1, init=(F, Sigma))
        assert lls[1] >= lls[0] - 1e-8

    @pytest.mark.parametrize("seed", range(20))
    def test_em_monotone(self, seed):
        rng = np.random.default_rng(100 + seed)
        d = int(rng.integers(2, 7))
        q = int(rng.integers(1, d + 1))
        F = rng.standard_normal((d, q))
        X, labels = sample_plda(rng, F, random_spd(rng, d), int(rng.integers(3, 15)),
                                int(rng.integers(2, 6)))
        _, lls = backend.plda_fit(X, labels, q, em_iters=15)
        assert np.all(np.diff(lls) >= -1e-8 * np.maximum(1.0, np.abs(lls[1:])))

    def test_latent_equals_dim(self):
        rng = np.random.default_rng(6)
        X, labels = sample_plda(rng, rng.standard_normal((4, 4)), np.eye(4), 10, 3)
        model, _ = backend.plda_fit(X, labels, 4, em_iters=5)
        assert np.all(np.linalg.eigvalsh(model.Sigma) > 0)

    def test_log_likelihood_matches_dense_gaussian(self):
        rng = np.random.default_rng(7)
        F = rng.standard_normal((3, 2))
        Sigma = random_spd(rng, 3)
        mu = rng.standard_normal(3)
        X, labels = sample_plda(rng, F, Sigma, 4, 3, mu)
        expected = 0.0
        B = F @ F.T
        for k in range(4):
            xs = X[labels == k].ravel()
            cov = np.kron(np.ones((3, 3)), B) + np.kron(np.eye(3), Sigma)
            expected += multivariate_normal(np.tile(mu, 3), cov).logpdf(xs)
        got = backend.plda_log_likelihood(X, labels, mu, F, Sigma)
        assert got == pytest.approx(expected, rel=1e-10)

    def test_needs_two_speakers_with_repeats(self):
        X = np.random.default_rng(0).standard_normal((4, 3))
        with pytest.raises(ValueError, match="at least 2 speakers"):
            backend.plda_fit(X, [0, 1, 2, 3], 1)


class TestPLDAScore:
    def test_one_dimensional_closed_form(self):
        f, s, mu = 1.3, 0.4, 0.2
        model = backend.PLDAModel(np.array([mu]), np.array([[f]]), np.array([[s]]))
        for a, b in [(0.1, 0.5), (-1.0, 2.0), (0.2, 0.2)]:
            # hand-derived: bivariate normal with variance t and covariance f^2
            t, c = f * f + s, f * f
            x, y = a - mu, b - mu
            det = t * t - c * c
            same = -np.log(2 * np.pi) - 0.5 * np.log(det) - 0.5 * (t * x * x - 2 * c * x * y + t * y * y) / det
            diff = -np.log(2 * np.pi * t) - 0.5 * (x * x + y * y) / t
            assert backend.plda_score(model, [a], [b]) == pytest.approx(same - diff, abs=1e-9)

    def test_matches_density_oracle(self):
        rng = np.random.default_rng(8)
        F = rng.standard_normal((5, 3))
        Sigma = random_spd(rng, 5)
        mu = rng.standard_normal(5)
        model = backend.PLDAModel(mu, F, Sigma)
        for _ in range(5):
            a, b = rng.standard_normal(5), rng.standard_normal(5)
            assert backend.plda_score(model, a, b) == pytest.approx(
                pair_llr_oracle(mu, F, Sigma, a, b), abs=1e-9)

    def test_mean_pair_beats_distant_pair(self):
        rng = np.random.default_rng(9)
        F = rng.standard_normal((4, 2))
        Sigma = random_spd(rng, 4)
        mu = rng.standard_normal(4)
        model = backend.PLDAModel(mu, F, Sigma)
        std = np.sqrt(np.diag(F @ F.T + Sigma))
        at_mean = backend.plda_score(model, mu, mu)
        assert at_mean == pytest.approx(pair_llr_oracle(mu, F, Sigma, mu, mu), abs=1e-9)
        assert at_mean > backend.plda_score(model, mu, mu + 5 * std)

    def test_symmetry(self):
        rng = np.random.default_rng(10)
        model = backend.PLDAModel(rng.standard_normal(6), rng.standard_normal((6, 3)),
                                  random_spd(rng, 6))
        for _ in range(50):
            a, b = rng.standard_normal((2, 6))
            assert abs(backend.plda_score(model, a, b) - backend.plda_score(model, b, a)) < 1e-10

    def test_calibration_sanity(self):
        rng = np.random.default_rng(11)
        F = rng.standard_normal((5, 3))
        Sigma = random_spd(rng, 5, 0.5)
        model = backend.PLDAModel(np.zeros(5), F, Sigma)
        h = rng.standard_normal((10_000, 3))
        noise = lambda: rng.multivariate_normal(np.zeros(5), Sigma, 10_000)
        same_a, same_b = h @ F.T + noise(), h @ F.T + noise()
        diff_b = rng.standard_normal((10_000, 3)) @ F.T + noise()
        Q, P, const = model.scoring_matrices()
        score = lambda A, B: (0.5 * np.einsum("ij,jk,ik->i", A, Q, A)
                              + 0.5 * np.einsum("ij,jk,ik->i", B, Q, B)
                              + np.einsum("ij,jk,ik->i", A, P, B) + const)
        assert score(same_a, same_b).mean() > score(same_a, diff_b).mean()

    def test_unfitted(self):
        with pytest.raises(backend.NotFittedError):
            backend.PLDABackend().score(np.ones(3), np.ones(3))


class TestBackendPipeline:
    def test_separates_synthetic_speakers(self):
        rng = np.random.default_rng(12)
        F = rng.standard_normal((16, 6))
        X, labels = sample_plda(rng, F, 0.3 * np.eye(16), 20, 10)
        be = backend.PLDABackend(lda_dim=8, latent_dim=6).fit(X, labels)
        Xt, lt = sample_plda(rng, F, 0.3 * np.eye(16), 10, 2)
        pairs = [(i, j) for i in range(len(Xt)) for j in range(i + 1, len(Xt))]
        scores = be.score_pairs(Xt, pairs)
        tgt = np.array([lt[i] == lt[j] for i, j in pairs])
        assert scores[tgt].mean() > scores[~tgt].mean()
        i, j = pairs[0]
        assert scores[0] == pytest.approx(be.score(Xt[i], Xt[j]), abs=1e-10)

    def test_score_file_round_trip(self, tmp_path):
        trials = [Trial("a", "b", True), Trial("a", "c", False)]
        path = tmp_path / "scores.txt"
        backend.write_scores(path, trials, [0.1234567, -2.0])
        assert path.read_text() == "a\tb\t0.123457\na\tc\t-2.000000\n"
        assert backend.read_scores(path) == {("a", "b"): 0.123457, ("a", "c"): -2.0}

    def test_malformed_score_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("a\tb\n")
        with pytest.raises(ValueError, match="malformed"):
            backend.read_scores(path)
