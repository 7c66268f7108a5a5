"""Linear-Gaussian image formation model and its population-optimal estimators.

Images and gaze are generated per subject i and sample j as

    X = W_t t + W_c c_i + v,        g = t + b_i

with t the subject-independent gaze (optic axis), c_i the subject's
appearance offset, v pixel noise and b_i the subject's gaze bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy import linalg

RANK_RTOL = 1e-10
PSD_ATOL = 1e-10


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class GazeLaw:
    """Distribution of the subject-independent gaze t.

    ``kind="gaussian"`` uses the model's ``Sigma_t``; ``kind="uniform"`` draws
    each axis from U(lo, hi) and substitutes the matched second moment
    (hi - lo)^2 / 12 wherever ``Sigma_t`` enters a closed form.
    """

    kind: str = "gaussian"
    lo: float = -30.0
    hi: float = 30.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ModelError(f"unknown gaze law {self.kind!r}")
        if self.kind == "uniform" and not self.hi > self.lo:
            raise ModelError("uniform gaze law needs hi > lo")

    @classmethod
    def uniform(cls, lo: float = -30.0, hi: float = 30.0) -> "GazeLaw":
        return cls("uniform", lo, hi)

    @classmethod
    def parse(cls, text: str) -> "GazeLaw":
        """Parse ``gaussian`` or ``uniform(lo, hi)``."""
        text = text.strip().lower()
        if text == "gaussian":
            return cls()
        if text.startswith("uniform"):
            inner = text[len("uniform"):].strip()
            if not inner:
                return cls.uniform()
            if inner[0] != "(" or inner[-1] != ")":
                raise ModelError(f"cannot parse gaze law {text!r}")
            lo, hi = (float(x) for x in inner[1:-1].split(","))
            return cls.uniform(lo, hi)
        raise ModelError(f"cannot parse gaze law {text!r}")

    def __str__(self):
        return "gaussian" if self.kind == "gaussian" else f"uniform({self.lo:g},{self.hi:g})"


def _check_psd(name: str, a: np.ndarray, n: int) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape != (n, n):
        raise ModelError(f"{name} must be {n}x{n}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelError(f"{name} has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > PSD_ATOL:
        raise ModelError(f"{name} is not symmetric")
    if n and np.linalg.eigvalsh(a).min() < -PSD_ATOL:
        raise ModelError(f"{name} is not positive semidefinite")
    return a


def full_column_rank(a: np.ndarray, rtol: float = RANK_RTOL) -> bool:
    if a.shape[1] == 0:
        return True
    sv = np.linalg.svd(a, compute_uv=False)
    return a.shape[1] <= a.shape[0] and sv[-1] > rtol * sv[0]


def _sqrt_factor(cov: np.ndarray) -> np.ndarray:
    """L with L L^T = cov; valid for singular PSD matrices."""
    if not cov.size:
        return cov
    if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
        return np.diag(np.sqrt(np.diag(cov)))
    w, q = np.linalg.eigh(cov)
    return q * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class LinearModel:
    W_t: np.ndarray
    W_c: np.ndarray
    Sigma_t: np.ndarray
    Sigma_c: np.ndarray
    Sigma_v: np.ndarray
    Sigma_b: np.ndarray
    gaze_law: GazeLaw = field(default_factory=GazeLaw)

    def __post_init__(self):
        W_t = np.asarray(self.W_t, dtype=float)
        W_c = np.asarray(self.W_c, dtype=float)
        if W_c.ndim == 1 and W_c.size == 0:
            W_c = W_c.reshape(W_t.shape[0], 0)
        if W_t.ndim != 2 or W_t.shape[1] != 2:
            raise ModelError(f"W_t must be s x 2, got {W_t.shape}")
        s = W_t.shape[0]
        if W_c.ndim != 2 or W_c.shape[0] != s:
            raise ModelError(f"W_c must be {s} x p, got {W_c.shape}")
        p = W_c.shape[1]
        if s < 2 + p:
            raise ModelError(f"need s >= 2 + p, got s={s}, p={p}")
        if not full_column_rank(W_t):
            raise ModelError("W_t does not have full column rank")
        if not full_column_rank(W_c):
            raise ModelError("W_c does not have full column rank")
        object.__setattr__(self, "W_t", W_t)
        object.__setattr__(self, "W_c", W_c)
        object.__setattr__(self, "Sigma_t", _check_psd("Sigma_t", self.Sigma_t, 2))
        object.__setattr__(self, "Sigma_c", _check_psd("Sigma_c", self.Sigma_c, p))
        object.__setattr__(self, "Sigma_v", _check_psd("Sigma_v", self.Sigma_v, s))
        object.__setattr__(self, "Sigma_b", _check_psd("Sigma_b", self.Sigma_b, 2))
        for name in ("W_t", "W_c", "Sigma_t", "Sigma_c", "Sigma_v", "Sigma_b"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def isotropic(cls, W_t, W_c, sigma_t2=300.0, sigma_c2=36.0, sigma_v2=4.0,
                  sigma_b2=4.0, gaze_law: GazeLaw | None = None) -> "LinearModel":
        """Model with scalar-times-identity covariances.

        For a uniform gaze law `sigma_t2` is ignored and replaced by the
        law's second moment.
        """
        W_t = np.asarray(W_t, dtype=float)
        W_c = np.asarray(W_c, dtype=float).reshape(W_t.shape[0], -1)
        s, p = W_c.shape
        law = gaze_law or GazeLaw()
        if law.kind == "uniform":
            sigma_t2 = (law.hi - law.lo) ** 2 / 12.0
        return cls(W_t, W_c, sigma_t2 * np.eye(2), sigma_c2 * np.eye(p),
                   sigma_v2 * np.eye(s), sigma_b2 * np.eye(2), law)

    @property
    def s(self) -> int:
        return self.W_t.shape[0]

    @property
    def p(self) -> int:
        return self.W_c.shape[1]

    @property
    def gaze_cov(self) -> np.ndarray:
        """Second moment of t used in closed forms (depends on the gaze law)."""
        if self.gaze_law.kind == "uniform":
            return (self.gaze_law.hi - self.gaze_law.lo) ** 2 / 12.0 * np.eye(2)
        return self.Sigma_t

    def overlap(self) -> float:
        """Max-norm of W_t^T W_c."""
        prod = self.W_t.T @ self.W_c
        return float(np.max(np.abs(prod), initial=0.0))


class SubjectSample(NamedTuple):
    subject: int
    X: np.ndarray
    g: np.ndarray
    t: np.ndarray | None = None
    c: np.ndarray | None = None
    b: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class Dataset:
    """Samples stored column-wise: row k is one (subject, image, gaze) triple.

    Latent arrays are present only when generated with ``retain_latents``;
    ``c`` and ``b`` are indexed by subject position, the rest by row.
    """

    subject: np.ndarray
    X: np.ndarray
    g: np.ndarray
    t: np.ndarray | None = None
    v: np.ndarray | None = None
    c: np.ndarray | None = None
    b: np.ndarray | None = None

    def __len__(self):
        return len(self.subject)

    def __iter__(self) -> Iterator[SubjectSample]:
        for k, i in enumerate(self.subject):
            latent = {}
            if self.t is not None:
                latent = dict(t=self.t[k], c=self.c[i], b=self.b[i], v=self.v[k])
            yield SubjectSample(int(i), self.X[k], self.g[k], **latent)

    @property
    def subjects(self) -> np.ndarray:
        return np.unique(self.subject)

    def subset(self, subjects) -> "Dataset":
        """Rows belonging to `subjects`; subject ids and latents are kept."""
        mask = np.isin(self.subject, subjects)
        return Dataset(self.subject[mask], self.X[mask], self.g[mask],
                       None if self.t is None else self.t[mask],
                       None if self.v is None else self.v[mask],
                       self.c, self.b)


def subject_streams(seed, count: int) -> list[np.random.Generator]:
    """One independent generator per subject, derived from `seed`."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(count)]


def draw_subject(model: LinearModel, J: int, rng: np.random.Generator,
                 gaze_law: GazeLaw | None = None):
    """Draw (X, g, t, c, b, v) for one subject with `J` samples."""
    law = gaze_law or model.gaze_law
    s, p = model.s, model.p
    c = _sqrt_factor(model.Sigma_c) @ rng.standard_normal(p)
    b = _sqrt_factor(model.Sigma_b) @ rng.standard_normal(2)
    if law.kind == "uniform":
        t = rng.uniform(law.lo, law.hi, size=(J, 2))
    else:
        t = rng.standard_normal((J, 2)) @ _sqrt_factor(model.Sigma_t).T
    Lv = _sqrt_factor(model.Sigma_v)
    z = rng.standard_normal((J, s))
    if np.count_nonzero(Lv - np.diag(np.diag(Lv))) == 0:
        v = z * np.diag(Lv)
    else:
        v = z @ Lv.T
    X = t @ model.W_t.T + (model.W_c @ c) + v
    g = t + b
    return X, g, t, c, b, v


def generate_dataset(model: LinearModel, I: int, J: int, seed,
                     gaze_law: GazeLaw | None = None,
                     retain_latents: bool = False) -> Dataset:
    """Draw `I` subjects with `J` samples each.

    Each subject uses its own stream spawned from `seed`, so subject k is the
    same whether it is drawn here or by :func:`iter_subjects`.
    """
    if I < 1 or J < 1:
        raise ValueError("I and J must be >= 1")
    parts = [draw_subject(model, J, rng, gaze_law) for rng in subject_streams(seed, I)]
    subject = np.repeat(np.arange(I), J)
    X = np.concatenate([q[0] for q in parts])
    g = np.concatenate([q[1] for q in parts])
    if not retain_latents:
        return Dataset(subject, X, g)
    return Dataset(subject, X, g,
                   t=np.concatenate([q[2] for q in parts]),
                   v=np.concatenate([q[5] for q in parts]),
                   c=np.stack([q[3] for q in parts]),
                   b=np.stack([q[4] for q in parts]))


def iter_subjects(model: LinearModel, I: int, J: int, seed,
                  gaze_law: GazeLaw | None = None):
    """Yield (X, g) per subject without materializing the whole dataset."""
    for rng in subject_streams(seed, I):
        X, g, *_ = draw_subject(model, J, rng, gaze_law)
        yield X, g


# -- population quantities -------------------------------------------------

def population_Sigma_X(model: LinearModel) -> np.ndarray:
    """E[X X^T] = W_t S_t W_t^T + W_c S_c W_c^T + S_v."""
    Wt, Wc = model.W_t, model.W_c
    out = Wt @ model.gaze_cov @ Wt.T + Wc @ model.Sigma_c @ Wc.T + model.Sigma_v
    return (out + out.T) / 2


def population_C_X(model: LinearModel) -> np.ndarray:
    """Covariance of the subject-centered image X - W_c c_i."""
    out = model.W_t @ model.gaze_cov @ model.W_t.T + model.Sigma_v
    return (out + out.T) / 2


def woodbury_inverse(model: LinearModel) -> np.ndarray:
    """Sigma_X^{-1} through the low-rank update of Sigma_v by U = [W_t W_c].

    Uses A^{-1} - A^{-1} U S (I + U^T A^{-1} U S)^{-1} U^T A^{-1}, the
    push-through form of the Woodbury identity, which stays valid when the
    block-diagonal S = diag(S_t, S_c) is singular.
    """
    U = np.hstack([model.W_t, model.W_c])
    S = linalg.block_diag(model.gaze_cov, model.Sigma_c)
    A_inv = _spd_inverse(model.Sigma_v, "Sigma_v")
    AU = A_inv @ U
    inner = np.eye(U.shape[1]) + U.T @ AU @ S
    out = A_inv - AU @ S @ np.linalg.solve(inner, AU.T)
    return (out + out.T) / 2


def _spd_inverse(a: np.ndarray, name: str) -> np.ndarray:
    try:
        cf = linalg.cho_factor(a)
    except linalg.LinAlgError:
        raise ModelError(f"{name} is singular") from None
    return linalg.cho_solve(cf, np.eye(a.shape[0]))


def spd_solve_right(B: np.ndarray, A: np.ndarray, name: str = "matrix") -> np.ndarray:
    """B A^{-1} for symmetric positive definite A, via Cholesky."""
    try:
        cf = linalg.cho_factor(A)
    except linalg.LinAlgError:
        raise ModelError(f"{name} is singular or not positive definite") from None
    return linalg.cho_solve(cf, B.T).T


@dataclass(frozen=True)
class LinearEstimator:
    """Gaze estimate K X, optionally plus a per-subject bias."""

    K: np.ndarray
    biases: dict = field(default_factory=dict)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim != 2 or K.shape[0] != 2:
            raise ValueError(f"K must be 2 x s, got {K.shape}")
        if not np.all(np.isfinite(K)):
            raise ValueError("K has non-finite entries")
        object.__setattr__(self, "K", K)

    def predict(self, X, subjects=None) -> np.ndarray:
        """K X per row; adds the stored bias when `subjects` is given."""
        out = np.asarray(X) @ self.K.T
        if subjects is not None:
            out = out + bias_rows(self.biases, subjects)
        return out


def bias_rows(biases: dict, subjects) -> np.ndarray:
    subjects = np.asarray(subjects)
    uniq, inv = np.unique(subjects, return_inverse=True)
    missing = [u for u in uniq.tolist() if u not in biases]
    if missing:
        raise KeyError(f"no bias for subjects {missing[:5]}")
    table = np.array([np.asarray(biases[u], dtype=float) for u in uniq.tolist()]).reshape(-1, 2)
    return table[inv]


def oracle_K_nocal(model: LinearModel, check: bool = True) -> LinearEstimator:
    """Optimal estimator without calibration, S_t W_t^T Sigma_X^{-1}.

    With `check`, the Woodbury route is evaluated as well and must agree
    within 1e-8 relative.
    """
    if np.linalg.eigvalsh(model.Sigma_v).min() <= 0:
        raise ModelError("Sigma_v must be positive definite for estimator operations")
    B = model.gaze_cov @ model.W_t.T
    K = spd_solve_right(B, population_Sigma_X(model), "Sigma_X")
    if check:
        K_w = B @ woodbury_inverse(model)
        rel = np.linalg.norm(K - K_w) / max(np.linalg.norm(K), 1e-300)
        if rel > 1e-8:
            raise ModelError(f"direct and Woodbury estimators disagree (rel {rel:.2e})")
    return LinearEstimator(K)


def oracle_K_cal(model: LinearModel) -> LinearEstimator:
    """Optimal estimator under ideal calibration, S_t W_t^T C_X^{-1}."""
    if np.linalg.eigvalsh(model.Sigma_v).min() <= 0:
        raise ModelError("Sigma_v must be positive definite for estimator operations")
    B = model.gaze_cov @ model.W_t.T
    return LinearEstimator(spd_solve_right(B, population_C_X(model), "C_X"))


def ideal_biases(model: LinearModel, K, data: Dataset) -> dict:
    """mu_i = b_i - K W_c c_i for every subject with retained latents."""
    K = K.K if isinstance(K, LinearEstimator) else np.asarray(K)
    if data.c is None or data.b is None:
        raise ValueError("dataset was generated without latents")
    mu = data.b - data.c @ (K @ model.W_c).T
    return {int(i): mu[i] for i in data.subjects}


# -- mean squared errors ---------------------------------------------------

def mse_nocal(K, data: Dataset) -> float:
    """Mean of ||g - K X||^2 over samples; biases are ignored."""
    K = K.K if isinstance(K, LinearEstimator) else np.asarray(K)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if K.shape[1] != data.X.shape[1]:
        raise ValueError(f"K has {K.shape[1]} columns, images have {data.X.shape[1]}")
    r = data.g - data.X @ K.T
    return float(np.mean(np.sum(r * r, axis=1)))


def mse_cal(K, data: Dataset, biases: dict) -> float:
    """Mean of ||g - (K X + mu_i)||^2 with per-subject biases mu_i."""
    K = K.K if isinstance(K, LinearEstimator) else np.asarray(K)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if K.shape[1] != data.X.shape[1]:
        raise ValueError(f"K has {K.shape[1]} columns, images have {data.X.shape[1]}")
    r = data.g - data.X @ K.T - bias_rows(biases, data.subject)
    return float(np.mean(np.sum(r * r, axis=1)))


def population_mse_nocal(model: LinearModel, K) -> float:
    """Expected ||g - K X||^2 under the model."""
    K = K.K if isinstance(K, LinearEstimator) else np.asarray(K)
    St = model.gaze_cov
    Sgx = St @ model.W_t.T
    return float(np.trace(St + model.Sigma_b) - 2 * np.trace(K @ Sgx.T)
                 + np.trace(K @ population_Sigma_X(model) @ K.T))


def population_mse_cal(model: LinearModel, K) -> float:
    """Expected ||g - (K X + mu_i)||^2 with the ideal mu_i."""
    K = K.K if isinstance(K, LinearEstimator) else np.asarray(K)
    St = model.gaze_cov
    Sgx = St @ model.W_t.T
    return float(np.trace(St) - 2 * np.trace(K @ Sgx.T)
                 + np.trace(K @ population_C_X(model) @ K.T))
