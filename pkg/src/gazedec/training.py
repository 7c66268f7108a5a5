"""Empirical linear gaze estimators trained with and without decomposition.

Everything here works from :class:`Moments`, the sufficient statistics of a
training set (pooled second moments plus per-subject sums), so a training
set never has to be held in memory at once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .linmodel import Dataset, LinearEstimator

log = logging.getLogger(__name__)

RIDGE_SCALE = 1e-8


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class Moments:
    """Accumulated sums over samples, grouped by subject.

    ``Sxx = sum X X^T``, ``Sgx = sum g X^T``, ``Sgg = sum g g^T``; per subject
    the sample count and the sums of X and g.
    """

    s: int
    n: int = 0
    Sxx: np.ndarray = None
    Sgx: np.ndarray = None
    Sgg: np.ndarray = None
    keys: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    sum_x: list = field(default_factory=list)
    sum_g: list = field(default_factory=list)

    def __post_init__(self):
        if self.Sxx is None:
            self.Sxx = np.zeros((self.s, self.s))
            self.Sgx = np.zeros((2, self.s))
            self.Sgg = np.zeros((2, 2))

    def add_subject(self, key, X, g) -> None:
        X = np.asarray(X, dtype=float)
        g = np.asarray(g, dtype=float)
        if key in self.keys:
            raise ValueError(f"subject {key!r} already added")
        self.n += len(X)
        self.Sxx += X.T @ X
        self.Sgx += g.T @ X
        self.Sgg += g.T @ g
        self.keys.append(key)
        self.counts.append(len(X))
        self.sum_x.append(X.sum(axis=0))
        self.sum_g.append(g.sum(axis=0))

    @classmethod
    def from_dataset(cls, data: Dataset) -> "Moments":
        m = cls(data.X.shape[1])
        order = np.argsort(data.subject, kind="stable")
        subj = data.subject[order]
        bounds = np.flatnonzero(np.diff(subj)) + 1
        for idx in np.split(order, bounds):
            if len(idx):
                m.add_subject(data.subject[idx[0]].item(), data.X[idx], data.g[idx])
        return m

    def copy(self) -> "Moments":
        return Moments(self.s, self.n, self.Sxx.copy(), self.Sgx.copy(), self.Sgg.copy(),
                       list(self.keys), list(self.counts), list(self.sum_x), list(self.sum_g))

    def subject_means(self):
        cnt = np.asarray(self.counts, dtype=float)[:, None]
        return np.asarray(self.sum_x) / cnt, np.asarray(self.sum_g) / cnt

    def centered(self):
        """(C_X, C_gX, C_gg): second moments after removing subject means."""
        mx, mg = self.subject_means()
        w = np.asarray(self.counts, dtype=float)[:, None]
        Cx = (self.Sxx - (mx * w).T @ mx) / self.n
        Cgx = (self.Sgx - (mg * w).T @ mx) / self.n
        Cgg = (self.Sgg - (mg * w).T @ mg) / self.n
        return (Cx + Cx.T) / 2, Cgx, (Cgg + Cgg.T) / 2

    # Squared errors evaluated from the moments; no pass over samples.

    def mse_nocal(self, K) -> float:
        """Mean ||g - K X||^2 over the accumulated samples."""
        K = K.K if isinstance(K, LinearEstimator) else np.asarray(K)
        return float((np.trace(self.Sgg) - 2 * np.sum(K * self.Sgx)
                      + np.sum((K @ self.Sxx) * K)) / self.n)

    def mse_cal_empirical(self, K) -> float:
        """Mean squared error after removing each subject's own mean residual."""
        K = K.K if isinstance(K, LinearEstimator) else np.asarray(K)
        Cx, Cgx, Cgg = self.centered()
        return float(np.trace(Cgg) - 2 * np.sum(K * Cgx) + np.sum((K @ Cx) * K))


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    solver: str = "closed_form"
    max_iters: int = 100_000
    tol: float = 1e-13

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.solver not in ("closed_form", "coordinate_descent"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass(frozen=True)
class FitResult:
    estimator: LinearEstimator
    sigma0: float
    sigma_t: float
    ridge: float = 0.0
    iterations: int = 0
    sigma0_axes: tuple = (0.0, 0.0)
    sigma_t_axes: tuple = (0.0, 0.0)

    @property
    def K(self) -> np.ndarray:
        return self.estimator.K

    @property
    def regularized(self) -> bool:
        return self.ridge > 0


def _solve(B, A, regularize: bool, what: str):
    """B A^{-1} for symmetric PSD A; adds a small ridge when A is singular."""
    s = A.shape[0]
    sv = np.linalg.eigvalsh(A)
    scale = max(sv[-1], np.finfo(float).tiny)
    ridge = 0.0
    if sv[0] <= 1e-12 * scale:
        rank = int(np.sum(sv > 1e-12 * scale))
        if not regularize:
            raise RankDeficientError(
                f"{what} is rank deficient (rank {rank} of {s}); "
                "collect more independent images or allow regularization")
        ridge = RIDGE_SCALE * np.trace(A) / s
        log.info("%s rank %d of %d; adding ridge %.3g", what, rank, s, ridge)
        A = A + ridge * np.eye(s)
    return linalg.cho_solve(linalg.cho_factor(A), B.T).T, ridge


def _pooled_sd(values: np.ndarray):
    """Scalar SD pooled over yaw and pitch, plus the per-axis SDs."""
    values = np.asarray(values, dtype=float).reshape(-1, 2)
    if len(values) == 0:
        return 0.0, (0.0, 0.0)
    var = values.var(axis=0)
    return float(np.sqrt(var.mean())), (float(np.sqrt(var[0])), float(np.sqrt(var[1])))


def _as_moments(data) -> Moments:
    return data if isinstance(data, Moments) else Moments.from_dataset(data)


def fit_nodec(data, regularize: bool = True) -> FitResult:
    """Least-squares K minimizing the pooled empirical MSE (no biases)."""
    m = _as_moments(data)
    if m.n == 0:
        raise ValueError("empty training set")
    K, ridge = _solve(m.Sgx / m.n, m.Sxx / m.n, regularize, "empirical Sigma_X")
    # Residual second moment, then SD around its mean.
    mx = np.sum(m.sum_x, axis=0) / m.n
    mg = np.sum(m.sum_g, axis=0) / m.n
    Srr = (m.Sgg - K @ m.Sgx.T - m.Sgx @ K.T + K @ m.Sxx @ K.T) / m.n
    mr = mg - K @ mx
    var = np.clip(np.diag(Srr) - mr ** 2, 0.0, None)
    sigma_t = float(np.sqrt(var.mean()))
    return FitResult(LinearEstimator(K), 0.0, sigma_t, ridge,
                     sigma_t_axes=tuple(float(x) for x in np.sqrt(var)))


def _dec_summary(m: Moments, K, mu, ridge, iterations) -> FitResult:
    mx, mg = m.subject_means()
    Cx, Cgx, Cgg = m.centered()
    # Residual g - K X - mu_i; its within-subject part comes from the
    # centered moments, its subject-mean part is mg - K mx - mu.
    within = np.diag(Cgg - K @ Cgx.T - Cgx @ K.T + K @ Cx @ K.T)
    offs = mg - mx @ K.T - mu
    w = np.asarray(m.counts, dtype=float)[:, None] / m.n
    mean_r = np.sum(w * offs, axis=0)
    var = np.clip(within + np.sum(w * offs ** 2, axis=0) - mean_r ** 2, 0.0, None)
    sigma0, sigma0_axes = _pooled_sd(mu)
    est = LinearEstimator(K, {k: mu[i].copy() for i, k in enumerate(m.keys)})
    return FitResult(est, sigma0, float(np.sqrt(var.mean())), ridge, iterations,
                     sigma0_axes, tuple(float(x) for x in np.sqrt(var)))


def fit_dec(data, cfg: TrainConfig | None = None, regularize: bool = True) -> FitResult:
    """Jointly fit K and per-subject biases mu_i (gaze decomposition).

    The closed form uses subject-centered moments; the coordinate-descent
    solver alternates exact updates of K and of the biases and minimizes

        sum ||g - K X - mu_i||^2 + lam * |sum_i mu_i|_1.
    """
    cfg = cfg or TrainConfig()
    m = _as_moments(data)
    if m.n == 0:
        raise ValueError("empty training set")
    lonely = [k for k, c in zip(m.keys, m.counts) if c < 2]
    if lonely:
        raise ValueError(f"subjects with fewer than 2 samples: {lonely[:5]}")
    if cfg.solver == "closed_form" and cfg.lam == 0:
        Cx, Cgx, _ = m.centered()
        K, ridge = _solve(Cgx, Cx, regularize, "subject-centered C_X")
        mx, mg = m.subject_means()
        return _dec_summary(m, K, mg - mx @ K.T, ridge, 0)
    if cfg.solver == "closed_form":
        log.info("lam > 0 has no closed form; using coordinate descent")
    return _fit_dec_cd(m, cfg, regularize)


def _bias_step(R, counts, lam):
    """Exact minimizer over biases of sum_i n_i ||mu_i - R_i||^2 + lam |sum mu_i|_1.

    `R` holds per-subject mean residuals. Per axis, the sum of biases is
    soft-thresholded and the shift is spread in proportion to 1/n_i.
    """
    if lam == 0:
        return R.copy()
    w = 1.0 / counts
    W = w.sum()
    M = R.sum(axis=0)
    S = np.sign(M) * np.maximum(np.abs(M) - lam * W / 2, 0.0)
    return R + np.outer(w / W, S - M)


def _fit_dec_cd(m: Moments, cfg: TrainConfig, regularize: bool) -> FitResult:
    counts = np.asarray(m.counts, dtype=float)
    mx, mg = m.subject_means()
    Sx = np.asarray(m.sum_x)
    A = m.Sxx / m.n
    # K step: K = (Sgx - sum_i mu_i sum_x_i^T) Sxx^{-1}; factor Sxx once.
    _, ridge = _solve(np.zeros((2, m.s)), A, regularize, "empirical Sigma_X")
    cf = linalg.cho_factor(A + ridge * np.eye(m.s))

    def objective(K, mu):
        offs = mg - mx @ K.T - mu
        Cx, Cgx, Cgg = m.centered()
        within = np.trace(Cgg - 2 * K @ Cgx.T + K @ Cx @ K.T) * m.n
        return within + np.sum(counts[:, None] * offs ** 2) + cfg.lam * np.abs(mu.sum(axis=0)).sum()

    mu = np.zeros((len(m.keys), 2))
    K = np.zeros((2, m.s))
    prev = np.inf
    it = 0
    for it in range(1, cfg.max_iters + 1):
        K = linalg.cho_solve(cf, ((m.Sgx - mu.T @ Sx) / m.n).T).T
        mu_new = _bias_step(mg - mx @ K.T, counts, cfg.lam)
        step = np.max(np.abs(mu_new - mu))
        mu = mu_new
        obj = objective(K, mu)
        if prev - obj <= cfg.tol * max(1.0, abs(obj)) and step <= cfg.tol * max(1.0, np.max(np.abs(mu))):
            break
        prev = obj
    else:
        log.warning("coordinate descent hit max_iters=%d", cfg.max_iters)
    return _dec_summary(m, K, mu, ridge, it)


def delta_K(nodec: FitResult, dec: FitResult, Sigma_X) -> tuple[np.ndarray, float]:
    """Difference K_nodec - K_dec and its quadratic form Tr(dK Sigma_X dK^T)."""
    dK = nodec.K - dec.K
    Sigma_X = np.asarray(Sigma_X, dtype=float)
    if nodec.K.shape != dec.K.shape or Sigma_X.shape != (dK.shape[1], dK.shape[1]):
        raise ValueError(f"dimension mismatch: {nodec.K.shape}, {dec.K.shape}, {Sigma_X.shape}")
    return dK, float(max(np.sum((dK @ Sigma_X) * dK), 0.0))


def delta_K_limit(model, b, c) -> np.ndarray:
    """Large-J limit of K_nodec - K_dec for orthogonal W_t, W_c and white noise.

    `b` (I x 2) and `c` (I x p) are the training subjects' latent biases and
    appearance offsets. The limit is E_i[b c^T] W_c^T (sigma_v^2 I + W_c
    S_c W_c^T)^{-1} with S_c = E_i[c c^T]; the inverse is applied through a
    solve, so it is defined even when fewer subjects than p are present.
    """
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    Wc = model.W_c
    sigma_v2 = float(np.mean(np.diag(model.Sigma_v)))
    Ebc = b.T @ c / len(b)
    Sc_hat = c.T @ c / len(c)
    A = sigma_v2 * np.eye(model.s) + Wc @ Sc_hat @ Wc.T
    return np.linalg.solve(A, Wc @ Ebc.T).T
