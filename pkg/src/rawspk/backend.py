"""Verification back-ends: cosine similarity and Gaussian PLDA.

The PLDA pipeline projects embeddings with LDA, centres and whitens them,
length-normalises, and models the result as ``x = mu + F h + e`` with
``h ~ N(0, I)`` shared by all utterances of a speaker and
``e ~ N(0, Sigma)`` per utterance. ``F`` and ``Sigma`` are fitted by EM.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)


class NotFittedError(RuntimeError):
    pass


class DegenerateInputError(ValueError):
    pass


def cosine_score(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _class_stats(X, labels):
    classes, inv = np.unique(labels, return_inverse=True)
    means = np.stack([X[inv == k].mean(axis=0) for k in range(len(classes))])
    counts = np.bincount(inv)
    return classes, inv, means, counts


def lda_fit(X, labels, out_dim):
    """LDA projection [d_in, out_dim], columns sorted by discriminability."""
    X = np.asarray(X, dtype=np.float64)
    classes, inv, means, counts = _class_stats(X, labels)
    d = X.shape[1]
    if not 1 <= out_dim <= min(d, len(classes) - 1):
        raise ValueError(
            f"out_dim={out_dim} must be in [1, min(d_in={d}, n_classes-1={len(classes) - 1})]")
    mu = X.mean(axis=0)
    within = X - means[inv]
    Sw = within.T @ within / len(X)
    Sw += 1e-6 * np.trace(Sw) / d * np.eye(d)
    centred = means - mu
    Sb = (centred * counts[:, None]).T @ centred / len(X)
    vals, vecs = linalg.eigh(Sb, Sw)
    order = np.argsort(vals)[::-1]
    if vals[order[0]] <= 1e-10:
        raise DegenerateInputError("class means coincide: between-class scatter is zero")
    return vecs[:, order[:out_dim]]


@dataclass
class Preprocessor:
    mean: np.ndarray
    lda: np.ndarray
    whitener: np.ndarray

    def transform(self, X, length_norm=True):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        Z = (np.atleast_2d(X) - self.mean) @ self.lda @ self.whitener.T
        if length_norm:
            norms = np.linalg.norm(Z, axis=1, keepdims=True)
            if np.any(norms < 1e-12):
                raise DegenerateInputError("whitened embedding is zero; cannot length-normalise")
            Z = Z / norms
        return Z[0] if single else Z


def fit_preprocessor(X, labels, lda_dim):
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    W = lda_fit(X, labels, lda_dim)
    Z = (X - mean) @ W
    cov = Z.T @ Z / len(Z)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 1e-12 * vals.max())
    whitener = vecs @ np.diag(vals ** -0.5) @ vecs.T
    return Preprocessor(mean, W, whitener)


@dataclass
class PLDAModel:
    mu: np.ndarray
    F: np.ndarray
    Sigma: np.ndarray
    preprocessor: Preprocessor = None

    @property
    def dim(self):
        return self.mu.shape[0]

    def scoring_matrices(self):
        B = self.F @ self.F.T
        T = B + self.Sigma
        same = np.block([[T, B], [B, T]])
        same_inv = np.linalg.inv(same)
        d = self.dim
        T_inv = np.linalg.inv(T)
        Q = T_inv - same_inv[:d, :d]
        P = -same_inv[:d, d:]
        const = -0.5 * np.linalg.slogdet(same)[1] + np.linalg.slogdet(T)[1]
        return Q, P, const


def _speaker_sums(R, labels):
    classes, inv = np.unique(labels, return_inverse=True)
    counts = np.bincount(inv)
    sums = np.zeros((len(classes), R.shape[1]))
    np.add.at(sums, inv, R)
    return counts, sums


def plda_log_likelihood(X, labels, mu, F, Sigma):
    """Exact marginal log-likelihood of the data, speakers independent."""
    R = np.asarray(X, dtype=np.float64) - mu
    counts, sums = _speaker_sums(R, labels)
    d = R.shape[1]
    S_inv = np.linalg.inv(Sigma)
    logdet_S = np.linalg.slogdet(Sigma)[1]
    Lam = F.T @ S_inv @ F
    quad_all = np.einsum("ij,jk,ik->", R, S_inv, R)
    ll = -0.5 * len(R) * (d * LOG_2PI + logdet_S) - 0.5 * quad_all
    q = F.shape[1]
    proj = sums @ (S_inv @ F)
    for n in np.unique(counts):
        sel = counts == n
        P = np.eye(q) + n * Lam
        b = proj[sel]
        ll += -0.5 * sel.sum() * np.linalg.slogdet(P)[1]
        ll += 0.5 * np.sum(b * np.linalg.solve(P, b.T).T)
    return float(ll)


def _init_params(R, labels, latent_dim):
    classes, inv, means, counts = _class_stats(R, labels)
    within = R - means[inv]
    Sigma = within.T @ within / len(R)
    Sigma = np.diag(np.diag(Sigma)) + 1e-6 * np.eye(R.shape[1])
    Sb = (means * counts[:, None]).T @ means / len(R)
    vals, vecs = np.linalg.eigh(Sb)
    order = np.argsort(vals)[::-1][:latent_dim]
    F = vecs[:, order] * np.sqrt(np.maximum(vals[order], 1e-3))
    return F, Sigma


def plda_fit(X, labels, latent_dim, em_iters=20, init=None):
    """EM for the factor-analysis PLDA model.

    Returns ``(model, log_likelihoods)`` with one log-likelihood per
    iteration, the first being that of the initial parameters.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts_all = np.unique(labels, return_counts=True)
    if len(classes) < 2 or np.sum(counts_all >= 2) < 2:
        raise ValueError("PLDA needs at least 2 speakers with at least 2 utterances each")
    d = X.shape[1]
    if not 1 <= latent_dim <= d:
        raise ValueError(f"latent_dim must be in [1, {d}], got {latent_dim}")
    mu = X.mean(axis=0)
    R = X - mu
    if init is None:
        F, Sigma = _init_params(R, labels, latent_dim)
    else:
        F, Sigma = (np.array(a, dtype=np.float64) for a in init)
    counts, sums = _speaker_sums(R, labels)
    scatter = R.T @ R
    N = len(R)
    q = F.shape[1]
    lls = [plda_log_likelihood(X, labels, mu, F, Sigma)]
    for _ in range(em_iters):
        S_inv = np.linalg.inv(Sigma)
        FtSi = F.T @ S_inv
        Lam = FtSi @ F
        acc_xh = np.zeros((d, q))
        acc_hh = np.zeros((q, q))
        # speakers with the same utterance count share a posterior covariance
        for n in np.unique(counts):
            sel = counts == n
            cov = np.linalg.inv(np.eye(q) + n * Lam)
            m = sums[sel] @ FtSi.T @ cov
            acc_xh += sums[sel].T @ m
            acc_hh += n * (sel.sum() * cov + m.T @ m)
        F = np.linalg.solve(acc_hh.T, acc_xh.T).T
        Sigma = (scatter - F @ acc_xh.T) / N
        Sigma = 0.5 * (Sigma + Sigma.T)
        if np.linalg.eigvalsh(Sigma).min() <= 0:
            warnings.warn("PLDA within-speaker covariance became singular; regularising",
                          RuntimeWarning, stacklevel=2)
            Sigma += 1e-6 * np.eye(d)
        lls.append(plda_log_likelihood(X, labels, mu, F, Sigma))
        logger.debug("plda em iteration %d: ll=%.6f", len(lls) - 1, lls[-1])
    return PLDAModel(mu, F, Sigma), lls


def plda_score(model, enroll, test):
    """Same-speaker vs different-speaker log-likelihood ratio."""
    if model is None or model.F is None:
        raise NotFittedError("PLDA model is not fitted")
    Q, P, const = model.scoring_matrices()
    a = np.asarray(enroll, dtype=np.float64) - model.mu
    b = np.asarray(test, dtype=np.float64) - model.mu
    return float(0.5 * (a @ Q @ a + b @ Q @ b) + a @ P @ b + const)


class PLDABackend:
    """LDA / whitening / length-norm followed by PLDA, as one fitted object."""

    def __init__(self, lda_dim=None, latent_dim=None, em_iters=20):
        self.lda_dim = lda_dim
        self.latent_dim = latent_dim
        self.em_iters = em_iters
        self.model = None

    def fit(self, X, labels):
        X = np.asarray(X, dtype=np.float64)
        n_classes = len(np.unique(labels))
        lda_dim = self.lda_dim or min(n_classes - 1, X.shape[1] // 2)
        pre = fit_preprocessor(X, labels, lda_dim)
        Z = pre.transform(X)
        self.model, self.log_likelihoods = plda_fit(
            Z, labels, self.latent_dim or lda_dim, self.em_iters)
        self.model.preprocessor = pre
        return self

    def preprocess(self, X):
        if self.model is None:
            raise NotFittedError("PLDA backend is not fitted")
        return self.model.preprocessor.transform(X)

    def score(self, enroll, test):
        if self.model is None:
            raise NotFittedError("PLDA backend is not fitted")
        return plda_score(self.model, self.preprocess(enroll), self.preprocess(test))

    def score_pairs(self, E, pairs):
        if self.model is None:
            raise NotFittedError("PLDA backend is not fitted")
        Z = self.preprocess(E)
        Q, P, const = self.model.scoring_matrices()
        A = Z - self.model.mu
        qa = 0.5 * np.einsum("ij,jk,ik->i", A, Q, A)
        return np.array([qa[i] + qa[j] + A[i] @ P @ A[j] + const for i, j in pairs])


def write_scores(path, trials, scores):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t, s in zip(trials, scores):
            fh.write(f"{t.enroll_id}\t{t.test_id}\t{s:.6f}\n")


def read_scores(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: malformed score line {line!r}")
            out[(parts[0], parts[1])] = float(parts[2])
    return out
