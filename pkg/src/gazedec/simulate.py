"""Monte-Carlo study of training with/without gaze decomposition.

For each value of the gaze/appearance overlap ||W_t^T W_c||_max, repeated
trials draw a training population, fit both estimators for a range of
training-subject counts, and score them with and without ideal calibration
on a fixed test population.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .calibration import RecordTable
from .linmodel import (GazeLaw, LinearEstimator, LinearModel, full_column_rank, iter_subjects,
                       oracle_K_cal, oracle_K_nocal, population_mse_nocal, population_Sigma_X,
                       generate_dataset, woodbury_inverse)
from .training import Moments, delta_K, fit_dec, fit_nodec

log = logging.getLogger(__name__)

CONDITIONS = ("nodec_nocal", "dec_nocal", "nodec_cal", "dec_cal")

# Stream tags for SeedSequence entropy; keep them fixed for reproducibility.
_MATRICES, _TEST, _TRIAL = 0, 1, 2


@dataclass(frozen=True)
class ExperimentConfig:
    s: int = 100
    p: int = 10
    sigma_c_scale: float = 36.0
    sigma_v_scale: float = 4.0
    sigma_b_scale: float = 4.0
    sigma_t_scale: float = 300.0
    overlaps: tuple = (0.0, 0.2, 0.4, 0.6)
    i_tr_list: tuple = (2, 5, 10, 20, 50, 100, 200, 500)
    j_tr: int = 50
    trials: int = 500
    test_subjects: int = 300
    test_per_subject: int = 1000
    master_seed: int = 0
    gaze_law: GazeLaw = field(default_factory=GazeLaw.uniform)

    def __post_init__(self):
        if any(o < 0 for o in self.overlaps):
            raise ValueError("overlap values must be >= 0")
        counts = [self.s, self.p, self.j_tr, self.trials, self.test_subjects,
                  self.test_per_subject, *self.i_tr_list]
        if min(counts) < 1 or not self.overlaps or not self.i_tr_list:
            raise ValueError("all counts must be >= 1 and lists non-empty")
        if self.p > self.s - 2:
            raise ValueError(f"p={self.p} too large for s={self.s}")
        object.__setattr__(self, "i_tr_list", tuple(sorted(set(int(i) for i in self.i_tr_list))))
        object.__setattr__(self, "overlaps", tuple(float(o) for o in self.overlaps))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """Read ``key = value`` lines; ``#`` starts a comment."""
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, value = (x.strip() for x in line.split("=", 1))
                key = {"overlap": "overlaps", "i_tr": "i_tr_list"}.get(key, key)
                if key not in types:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                kw[key] = _parse_value(key, value)
        return cls(**kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(f"{x:g}" for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(key: str, value: str):
    if key == "gaze_law":
        return GazeLaw.parse(value)
    if key == "overlaps":
        return tuple(float(x) for x in value.split(","))
    if key == "i_tr_list":
        return tuple(int(x) for x in value.split(","))
    if key in ("s", "p", "j_tr", "trials", "test_subjects", "test_per_subject", "master_seed"):
        return int(value)
    return float(value)


@dataclass(frozen=True)
class TrialResult:
    overlap: float
    i_tr: int
    trial: int
    rmse: dict  # condition -> RMSE in degrees


# -- model construction -------------------------------------------------------

def build_Wt(s: int, rng: np.random.Generator) -> np.ndarray:
    """Random s x 2 matrix with unit-length columns."""
    W = rng.standard_normal((s, 2))
    return W / np.linalg.norm(W, axis=0)


def build_Wc(W_t: np.ndarray, p: int, overlap: float, rng: np.random.Generator) -> np.ndarray:
    """Appearance matrix whose overlap ||W_t^T W_c||_max equals `overlap`.

    Base columns are random unit vectors orthogonal to span(W_t); each is
    then shifted by +/- `overlap` times a randomly chosen column of W_t.
    Given the same generator state, different overlaps share the base
    columns and the chosen shifts.
    """
    s = W_t.shape[0]
    if overlap < 0:
        raise ValueError("overlap must be >= 0")
    if p > s - 2:
        raise ValueError(f"p={p} leaves no room in the orthogonal complement (s={s})")
    if not np.allclose(np.linalg.norm(W_t, axis=0), 1.0, atol=1e-12):
        raise ValueError("W_t columns must have unit length")
    Q, _ = np.linalg.qr(W_t)
    base = rng.standard_normal((s, p))
    base -= Q @ (Q.T @ base)
    base -= Q @ (Q.T @ base)
    base /= np.linalg.norm(base, axis=0)
    cols = rng.integers(0, 2, size=p)
    signs = rng.choice([-1.0, 1.0], size=p)
    W_c = base + overlap * signs * W_t[:, cols]
    if not full_column_rank(W_c):
        raise ValueError("constructed W_c is rank deficient")
    return W_c


def build_model(cfg: ExperimentConfig, overlap: float) -> LinearModel:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, _MATRICES]))
    W_t = build_Wt(cfg.s, rng)
    W_c = build_Wc(W_t, cfg.p, overlap, rng)
    return LinearModel.isotropic(W_t, W_c, cfg.sigma_t_scale, cfg.sigma_c_scale,
                                 cfg.sigma_v_scale, cfg.sigma_b_scale, cfg.gaze_law)


def accumulate(model: LinearModel, I: int, J: int, seed) -> Moments:
    m = Moments(model.s)
    for i, (X, g) in enumerate(iter_subjects(model, I, J, seed)):
        m.add_subject(i, X, g)
    return m


# -- the sweep ------------------------------------------------------------------

def run_trial(cfg: ExperimentConfig, model: LinearModel, test: Moments,
              overlap_index: int, trial: int) -> list[TrialResult]:
    """One training population, fitted at every I_tr (nested prefixes)."""
    seed = np.random.SeedSequence([cfg.master_seed, _TRIAL, overlap_index, trial])
    m = Moments(model.s)
    out = []
    targets = list(cfg.i_tr_list)
    for i, (X, g) in enumerate(iter_subjects(model, targets[-1], cfg.j_tr, seed)):
        m.add_subject(i, X, g)
        if i + 1 != targets[0]:
            continue
        targets.pop(0)
        try:
            K_n = fit_nodec(m).K
            K_d = fit_dec(m).K
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"overlap #{overlap_index} trial {trial} I_tr={i + 1}: {exc}") from exc
        rmse = {
            "nodec_nocal": math.sqrt(test.mse_nocal(K_n)),
            "dec_nocal": math.sqrt(test.mse_nocal(K_d)),
            "nodec_cal": math.sqrt(test.mse_cal_empirical(K_n)),
            "dec_cal": math.sqrt(test.mse_cal_empirical(K_d)),
        }
        out.append(TrialResult(cfg.overlaps[overlap_index], i + 1, trial, rmse))
    return out


def default_threads() -> int:
    return os.cpu_count() or 1


def run_fig9(cfg: ExperimentConfig, threads: int | None = None) -> list[TrialResult]:
    """All trials for every overlap, sorted by (overlap, I_tr, trial).

    The output does not depend on `threads`: every (overlap, trial) pair
    has its own random stream.
    """
    threads = threads or default_threads()
    test_seed = np.random.SeedSequence([cfg.master_seed, _TEST])
    models, tests = [], []
    for ov in cfg.overlaps:
        model = build_model(cfg, ov)
        models.append(model)
        tests.append(accumulate(model, cfg.test_subjects, cfg.test_per_subject, test_seed))
        log.info("overlap %.3g: measured %.6g", ov, model.overlap())
    jobs = [(k, t) for k in range(len(cfg.overlaps)) for t in range(cfg.trials)]

    def work(job):
        k, t = job
        return run_trial(cfg, models[k], tests[k], k, t)

    if threads == 1:
        chunks = [work(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, jobs))
    results = [r for chunk in chunks for r in chunk]
    results.sort(key=lambda r: (r.overlap, r.i_tr, r.trial))
    return results


@dataclass(frozen=True)
class SummaryRow:
    overlap: float
    i_tr: int
    condition: str
    mean: float
    sd: float
    n: int


def summarize(results) -> list[SummaryRow]:
    """Mean and sample SD (ddof=1) of RMSE per (overlap, I_tr, condition)."""
    groups = defaultdict(list)
    for r in results:
        for cond in CONDITIONS:
            groups[(r.overlap, r.i_tr, cond)].append(r.rmse[cond])
    rows = []
    for (ov, i_tr, cond), vals in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], CONDITIONS.index(kv[0][2]))):
        a = np.asarray(vals)
        sd = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        rows.append(SummaryRow(ov, i_tr, cond, float(a.mean()), sd, len(a)))
    return rows


def crossover(rows, overlap: float) -> float:
    """Smallest I_tr from which nodec training beats dec training without
    calibration at every larger I_tr in the sweep; inf if it never does."""
    means = defaultdict(dict)
    for r in rows:
        if r.overlap == overlap:
            means[r.i_tr][r.condition] = r.mean
    i_list = sorted(means)
    better = [means[i]["nodec_nocal"] < means[i]["dec_nocal"] for i in i_list]
    for k, i in enumerate(i_list):
        if all(better[k:]):
            return float(i)
    return math.inf


def write_results(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["overlap", "i_tr", "trial", "condition", "rmse"])
        for r in results:
            for cond in CONDITIONS:
                w.writerow([repr(r.overlap), r.i_tr, r.trial, cond, repr(r.rmse[cond])])


def read_results(path) -> list[TrialResult]:
    rows = defaultdict(dict)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (float(row["overlap"]), int(row["i_tr"]), int(row["trial"]))
            rows[key][row["condition"]] = float(row["rmse"])
    return [TrialResult(ov, i, t, rm) for (ov, i, t), rm in rows.items()]


def write_summary(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["overlap", "i_tr", "condition", "mean_rmse", "sd_rmse", "n"])
        for r in rows:
            w.writerow([repr(r.overlap), r.i_tr, r.condition, repr(r.mean), repr(r.sd), r.n])


def simulate(cfg: ExperimentConfig, out_dir, threads: int | None = None) -> list[SummaryRow]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = run_fig9(cfg, threads)
    rows = summarize(results)
    write_results(out_dir / "results.csv", results)
    write_summary(out_dir / "summary.csv", rows)
    return rows


# -- theorem checks -------------------------------------------------------

def random_orthogonal_model(rng: np.random.Generator, s: int | None = None,
                            p: int | None = None) -> LinearModel:
    """Random model with W_t^T W_c = 0 and white noise.

    Sigma_t and Sigma_c are random SPD matrices; Sigma_v = sigma^2 I.
    """
    p = int(rng.integers(1, 11)) if p is None else p
    s = int(rng.integers(p + 2, 101)) if s is None else s
    W_t = rng.standard_normal((s, 2))
    Q, _ = np.linalg.qr(W_t)
    W_c = rng.standard_normal((s, p))
    W_c -= Q @ (Q.T @ W_c)
    W_c -= Q @ (Q.T @ W_c)

    def spd(n, scale):
        A = rng.standard_normal((n, n))
        return scale * (A @ A.T / n + 0.1 * np.eye(n))

    sigma_v2 = float(rng.uniform(0.5, 10.0))
    return LinearModel(W_t, W_c, spd(2, 100.0), spd(p, 30.0), sigma_v2 * np.eye(s),
                       spd(2, 4.0))


@dataclass(frozen=True)
class Theorem1Case:
    s: int
    p: int
    k_rel: float          # ||K_nocal - K_cal||_F / ||K_cal||_F
    woodbury_rel: float   # Woodbury vs direct inverse of Sigma_X
    k_wc: float           # ||K_nocal W_c||_F


def theorem1_check(n_models: int = 50, seed: int = 0) -> list[Theorem1Case]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_models):
        model = random_orthogonal_model(rng)
        K_n = oracle_K_nocal(model, check=False).K
        K_c = oracle_K_cal(model).K
        direct = np.linalg.solve(population_Sigma_X(model), np.eye(model.s))
        wood = woodbury_inverse(model)
        out.append(Theorem1Case(
            model.s, model.p,
            float(np.linalg.norm(K_n - K_c) / np.linalg.norm(K_c)),
            float(np.linalg.norm(wood - direct) / np.linalg.norm(direct)),
            float(np.linalg.norm(K_n @ model.W_c))))
    return out


@dataclass(frozen=True)
class Theorem2Cell:
    i_tr: int
    seed: int
    gap: float            # test MSE_nocal(nodec) - MSE_nocal(dec)
    gap_sd: float         # Monte-Carlo SD of `gap`
    population_gap: float
    trace: float          # Tr(dK Sigma_X dK^T)

    @property
    def holds(self) -> bool:
        return self.gap >= -self.gap_sd


def fig9_model(overlap: float = 0.0, seed: int = 0, **kw) -> LinearModel:
    cfg = ExperimentConfig(master_seed=seed, **kw)
    return build_model(cfg, overlap)


def theorem2_check(i_tr_list=(5, 10, 50, 150), seeds=range(20), j_tr: int = 10_000,
                   test_subjects: int = 100, test_per_subject: int = 300,
                   model: LinearModel | None = None) -> list[Theorem2Cell]:
    """Decomposed training never loses without calibration when W_t ⟂ W_c.

    Each (I_tr, seed) cell fits both estimators on J_tr samples per subject
    and compares them on a shared test set. Squared-error differences are
    paired per sample and averaged per test subject; the SD of `gap` treats
    test subjects as the independent units, since samples of one subject
    share its bias and appearance.
    """
    model = model or fig9_model(0.0)
    Sigma_X = population_Sigma_X(model)
    test = generate_dataset(model, test_subjects, test_per_subject, seed=[_TEST, 7])
    out = []
    for seed in seeds:
        for i_tr in i_tr_list:
            m = accumulate(model, i_tr, j_tr, [_TRIAL, seed, i_tr])
            nodec, dec = fit_nodec(m), fit_dec(m)
            r_n = test.g - test.X @ nodec.K.T
            r_d = test.g - test.X @ dec.K.T
            d = np.sum(r_n ** 2, axis=1) - np.sum(r_d ** 2, axis=1)
            per_subject = np.bincount(test.subject, weights=d) / np.bincount(test.subject)
            _, tr = delta_K(nodec, dec, Sigma_X)
            pop = population_mse_nocal(model, nodec.K) - population_mse_nocal(model, dec.K)
            sd = per_subject.std(ddof=1) / math.sqrt(len(per_subject))
            out.append(Theorem2Cell(i_tr, seed, float(d.mean()), float(sd), pop, tr))
    return out


# -- simulated calibration records --------------------------------------------

def records_from_model(model: LinearModel, estimator: LinearEstimator | np.ndarray,
                       I: int, J: int, seed, gaze_law: GazeLaw | None = None) -> RecordTable:
    """Test records whose estimates are the subject-independent K X."""
    K = estimator.K if isinstance(estimator, LinearEstimator) else np.asarray(estimator)
    data = generate_dataset(model, I, J, seed, gaze_law)
    subj = np.array([f"s{i:04d}" for i in data.subject])
    return RecordTable(subj, data.g, data.X @ K.T)
