"""Per-subject bias calibration on streams of (truth, estimate) records.

A record pairs a subject's true gaze with a subject-independent estimate of
it. Calibration draws a small set of records for one subject, estimates the
subject's bias from their residuals (MAP under a Gaussian prior), and is
scored by the mean angular error on that subject's remaining records.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .geometry import angular_error

CSV_FIELDS = ("subject_id", "yaw_true_deg", "pitch_true_deg", "yaw_est_deg", "pitch_est_deg")
DEFAULT_TOLERANCE = 2.0
MAX_PROPOSALS = 1000


class CalibrationError(ValueError):
    pass


class EstimateRecord(NamedTuple):
    subject: str
    g_true: tuple[float, float]
    t_hat: tuple[float, float]


@dataclass(frozen=True)
class RecordTable:
    """Records held as arrays; ``g_true`` and ``t_hat`` are (n, 2) in degrees."""

    subject: np.ndarray
    g_true: np.ndarray
    t_hat: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g_true, dtype=float).reshape(-1, 2)
        t = np.asarray(self.t_hat, dtype=float).reshape(-1, 2)
        subj = np.asarray(self.subject)
        if not (len(subj) == len(g) == len(t)):
            raise ValueError("subject, g_true and t_hat lengths differ")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(t))):
            raise ValueError("records contain non-finite angles")
        object.__setattr__(self, "subject", subj)
        object.__setattr__(self, "g_true", g)
        object.__setattr__(self, "t_hat", t)

    @classmethod
    def from_records(cls, records: Iterable[EstimateRecord]) -> "RecordTable":
        records = list(records)
        return cls(np.array([r.subject for r in records]),
                   np.array([r.g_true for r in records], dtype=float),
                   np.array([r.t_hat for r in records], dtype=float))

    def __len__(self):
        return len(self.subject)

    def __iter__(self):
        for s, g, t in zip(self.subject, self.g_true, self.t_hat):
            yield EstimateRecord(s.item() if hasattr(s, "item") else s, tuple(g), tuple(t))

    @property
    def subjects(self) -> list:
        """Subject keys in order of first appearance."""
        _, first = np.unique(self.subject, return_index=True)
        return [self.subject[i].item() for i in sorted(first)]

    def for_subject(self, subject) -> "RecordTable":
        mask = self.subject == subject
        if not mask.any():
            raise KeyError(f"no records for subject {subject!r}")
        return RecordTable(self.subject[mask], self.g_true[mask], self.t_hat[mask])

    @property
    def residuals(self) -> np.ndarray:
        return self.g_true - self.t_hat


@dataclass(frozen=True)
class CalibrationSet:
    """Calibration records of one subject, as indices into its RecordTable.

    ``T`` gaze targets with ``S`` images each; ``target`` is set for
    single-target sets.
    """

    indices: np.ndarray
    residuals: np.ndarray
    T: int
    S: int
    subject: object = None
    target: tuple[float, float] | None = None

    def __post_init__(self):
        if len(self.indices) != self.S * self.T:
            raise ValueError(f"{len(self.indices)} records but S*T = {self.S * self.T}")

    def __len__(self):
        return len(self.indices)

    @classmethod
    def empty(cls, subject=None) -> "CalibrationSet":
        return cls(np.zeros(0, dtype=int), np.zeros((0, 2)), 0, 0, subject)

    @classmethod
    def take(cls, records: RecordTable, indices, T: int, S: int, target=None) -> "CalibrationSet":
        indices = np.asarray(indices, dtype=int)
        subj = records.subject[indices[0]].item() if len(indices) else None
        return cls(indices, records.residuals[indices], T, S, subj, target)


@dataclass(frozen=True)
class CalibParams:
    sigma0: float
    sigma_t: float

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be > 0")
        if not self.sigma_t >= 0:
            raise ValueError("sigma_t must be >= 0")

    @property
    def ratio(self) -> float:
        return (self.sigma_t / self.sigma0) ** 2


ML = CalibParams(1.0, 0.0)


def map_bias_from_residuals(residuals, params: CalibParams) -> np.ndarray:
    """Shrunken mean sum(r) / (n + sigma_t^2 / sigma0^2); zero for no residuals."""
    r = np.asarray(residuals, dtype=float).reshape(-1, 2)
    if len(r) == 0:
        return np.zeros(2)
    return r.sum(axis=0) / (len(r) + params.ratio)


def map_bias(cal: CalibrationSet, params: CalibParams) -> np.ndarray:
    """MAP bias from a calibration set; plain mean when sigma_t = 0."""
    return map_bias_from_residuals(cal.residuals, params)


def sample_mgtc(records: RecordTable, T: int, rng: np.random.Generator) -> CalibrationSet:
    """T distinct records drawn uniformly, one image per target."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if len(records) < T + 1:
        raise CalibrationError(f"need at least {T + 1} records for T={T}, have {len(records)}")
    idx = rng.choice(len(records), size=T, replace=False)
    return CalibrationSet.take(records, np.sort(idx), T, 1)


def neighbors(records: RecordTable, target, tolerance: float = DEFAULT_TOLERANCE,
              neighborhood: str = "angular") -> np.ndarray:
    """Indices of records whose true gaze lies within `tolerance` of `target`."""
    if neighborhood == "angular":
        d = angular_error(records.g_true, np.asarray(target, dtype=float))
        return np.flatnonzero(np.atleast_1d(d) < tolerance)
    if neighborhood == "box":
        d = np.abs(records.g_true - np.asarray(target, dtype=float))
        return np.flatnonzero(np.all(d < tolerance, axis=1))
    raise ValueError(f"unknown neighborhood {neighborhood!r}")


def sgtc_at_target(records: RecordTable, target, S: int, rng: np.random.Generator,
                   tolerance: float = DEFAULT_TOLERANCE,
                   neighborhood: str = "angular") -> CalibrationSet | None:
    """S random records near `target`, or None when fewer than S qualify."""
    if S < 1:
        raise ValueError("S must be >= 1")
    near = neighbors(records, target, tolerance, neighborhood)
    if len(near) < S:
        return None
    idx = np.sort(rng.choice(near, size=S, replace=False))
    return CalibrationSet.take(records, idx, 1, S, tuple(float(x) for x in target))


def sample_sgtc(records: RecordTable, S: int, rng: np.random.Generator,
                tolerance: float = DEFAULT_TOLERANCE, neighborhood: str = "angular",
                max_proposals: int = MAX_PROPOSALS) -> CalibrationSet:
    """Single-target calibration set with a random target.

    Targets are proposed uniformly in the bounding box of the subject's true
    gaze and discarded until one has at least S neighbors.
    """
    lo = records.g_true.min(axis=0)
    hi = records.g_true.max(axis=0)
    for _ in range(max_proposals):
        target = rng.uniform(lo, hi)
        cal = sgtc_at_target(records, target, S, rng, tolerance, neighborhood)
        if cal is not None:
            return cal
    raise CalibrationError(f"no target with {S} records within {tolerance} deg "
                           f"after {max_proposals} proposals")


def evaluate(records: RecordTable, cal: CalibrationSet, params: CalibParams) -> float:
    """Mean angular error on the records outside `cal` after bias correction.

    `records` holds one subject (the one `cal` was drawn from).
    """
    keep = np.ones(len(records), dtype=bool)
    keep[cal.indices] = False
    if not keep.any():
        raise CalibrationError("no records left for testing")
    b = map_bias(cal, params)
    return float(np.mean(angular_error(records.g_true[keep], records.t_hat[keep] + b)))


class Bounds(NamedTuple):
    lower: float      # bias from all records, tested on all records
    uncalibrated: float


def lower_bound_E(records: RecordTable) -> Bounds:
    if len(records) == 0:
        raise ValueError("no records")
    b = records.residuals.mean(axis=0)
    lower = np.mean(angular_error(records.g_true, records.t_hat + b))
    nocal = np.mean(angular_error(records.g_true, records.t_hat))
    return Bounds(float(lower), float(nocal))


# -- region robustness sweep ----------------------------------------------

@dataclass(frozen=True)
class RegionResult:
    yaw_lo: float
    pitch_lo: float
    size: float
    mean_error: float   # nan when no grid target was feasible
    evaluations: int
    feasible_targets: int


@dataclass(frozen=True)
class RegionSweep:
    regions: list
    mean: float
    sd: float

    def table(self) -> list[dict]:
        return [dict(yaw_lo=r.yaw_lo, pitch_lo=r.pitch_lo, size=r.size,
                     mean_error=r.mean_error, evaluations=r.evaluations,
                     feasible_targets=r.feasible_targets) for r in self.regions]


def region_tiles(g_true, size: float):
    """Lower corners of the size x size tiles covering the gaze range."""
    lo = np.floor(g_true.min(axis=0) / size) * size
    hi = np.ceil(g_true.max(axis=0) / size) * size
    hi = np.maximum(hi, lo + size)
    yaws = np.arange(lo[0], hi[0] - size / 2, size)
    pitches = np.arange(lo[1], hi[1] - size / 2, size)
    return [(float(y), float(p)) for p in pitches for y in yaws]


def grid_targets(yaw_lo: float, pitch_lo: float, size: float, n: int = 10,
                 step: float = 0.5) -> np.ndarray:
    """n x n targets spaced `step` apart, centered in the tile."""
    margin = (size - (n - 1) * step) / 2
    offs = margin + step * np.arange(n)
    yy, pp = np.meshgrid(yaw_lo + offs, pitch_lo + offs, indexing="ij")
    return np.column_stack([yy.ravel(), pp.ravel()])


def region_grid_sweep(records: RecordTable, S: int, params: CalibParams,
                      rng: np.random.Generator, region_size: float = 5.0,
                      grid_n: int = 10, grid_step: float = 0.5, trials: int = 1,
                      tolerance: float = DEFAULT_TOLERANCE, neighborhood: str = "angular",
                      tiles=None) -> RegionSweep:
    """Mean SGTC error when the calibration target falls in each gaze tile.

    For every tile, every grid target and every subject with at least S
    records near the target, `trials` calibration sets are drawn and scored.
    Tiles without a feasible target are reported with a nan error and left
    out of the across-tile mean and SD.
    """
    per_subject = [records.for_subject(k) for k in records.subjects]
    tiles = tiles if tiles is not None else region_tiles(records.g_true, region_size)
    out = []
    for yaw_lo, pitch_lo in tiles:
        errs = []
        feasible = 0
        for target in grid_targets(yaw_lo, pitch_lo, region_size, grid_n, grid_step):
            hit = False
            for rec in per_subject:
                for _ in range(trials):
                    cal = sgtc_at_target(rec, target, S, rng, tolerance, neighborhood)
                    if cal is None or len(cal) == len(rec):
                        break
                    errs.append(evaluate(rec, cal, params))
                    hit = True
            feasible += hit
        mean = float(np.mean(errs)) if errs else math.nan
        out.append(RegionResult(yaw_lo, pitch_lo, region_size, mean, len(errs), feasible))
    vals = np.array([r.mean_error for r in out if r.evaluations])
    if len(vals) == 0:
        raise CalibrationError("no region had a feasible calibration target")
    return RegionSweep(out, float(vals.mean()), float(vals.std()))


# -- CSV ingestion ---------------------------------------------------------

def read_records_csv(path) -> RecordTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(f not in reader.fieldnames for f in CSV_FIELDS):
            raise ValueError(f"{path}: header must contain {','.join(CSV_FIELDS)}")
        subj, g, t = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                g.append((float(row["yaw_true_deg"]), float(row["pitch_true_deg"])))
                t.append((float(row["yaw_est_deg"]), float(row["pitch_est_deg"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            subj.append(row["subject_id"])
    if not subj:
        raise ValueError(f"{path}: no records")
    return RecordTable(np.array(subj), np.array(g), np.array(t))


def write_records_csv(path, records: RecordTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for s, g, t in zip(records.subject, records.g_true, records.t_hat):
            w.writerow([s, repr(float(g[0])), repr(float(g[1])), repr(float(t[0])), repr(float(t[1]))])
