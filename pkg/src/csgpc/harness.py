"""Data sets, evaluation metrics, fill statistics and timing benchmarks.

Every randomized routine draws from ``numpy.random.Philox`` keyed by a
single integer seed, so generated data is reproducible across platforms.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_ndtr

from . import ep
from .covariance import Hyperparams, build_kernel_matrix
from .model import GPClassifier, ModelConfig, optimize
from .sparse import EliminationTree, LdlFactor, SparseSymMatrix, symbolic_analyze

log = logging.getLogger(__name__)

__all__ = [
    "Dataset", "Standardization", "synth_clusters", "holdout_split", "load_csv", "write_csv",
    "stratified_folds", "classification_error", "nlpd", "CvResult", "cross_validate",
    "FillStats", "fill_stats", "BenchScenario", "BenchReport", "bench", "append_results",
    "BENCH_SCHEMA",
]


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator for ``seed``; ``stream`` separates independent uses."""
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream]))


@dataclass
class Standardization:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardization":
        X = np.asarray(X, dtype=float)
        scale = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(scale > 0, scale, 1.0))

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def invert(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.scale + self.mean


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str = ""
    standardization: Standardization | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.size:
            raise ValueError(f"{self.X.shape[0]} input rows but {self.y.size} labels")
        if self.y.size < 1:
            raise ValueError("a dataset needs at least one point")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("inputs contain missing or non-finite values")
        if np.any(np.abs(self.y) != 1):
            raise ValueError("labels must be -1 or +1")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.name, self.standardization)


def synth_clusters(n_total: int, d: int = 2, n_centers: int = 200, box_side: float = 10.0,
                   seed: int = 0, center_labels=None) -> Dataset:
    """Inputs labelled by the class of their nearest random center.

    Centers and inputs are uniform on ``[0, box_side]^d``; each center is
    +1 or -1 with probability one half unless ``center_labels`` fixes them.
    Distance ties go to the lowest center index.
    """
    if n_centers < 2:
        raise ValueError("need at least two centers")
    rng = rng_for(seed)
    centers = rng.uniform(0.0, box_side, size=(n_centers, d))
    labels = np.where(rng.random(n_centers) < 0.5, -1.0, 1.0)
    if center_labels is not None:
        labels = np.asarray(center_labels, dtype=float)
        if labels.shape != (n_centers,):
            raise ValueError("center_labels must have one entry per center")
    X = rng.uniform(0.0, box_side, size=(n_total, d))
    nearest = np.empty(n_total, dtype=np.int64)
    for lo in range(0, n_total, 4096):
        chunk = X[lo:lo + 4096]
        d2 = ((chunk[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        nearest[lo:lo + 4096] = np.argmin(d2, axis=1)  # first minimum on ties
    return Dataset(X, labels[nearest], name=f"clusters-d{d}-c{n_centers}-s{seed}")


def holdout_split(data: Dataset, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Fixed test split; the training part keeps a seeded random order.

    Taking the first ``m`` training points therefore gives nested subsets
    that never touch the test points.
    """
    if not 0 < n_test < data.n:
        raise ValueError("n_test must leave at least one training point")
    perm = rng_for(seed, 1).permutation(data.n)
    return data.subset(perm[n_test:]), data.subset(perm[:n_test])


def _parse_label(raw: float, row: int, col: int) -> float:
    if raw in (1.0, -1.0):
        return raw
    if raw == 0.0:
        return -1.0
    raise ValueError(f"row {row}, column {col}: label {raw!r} is not one of -1, 0, 1")


def load_csv(path, label_column_last: bool = True, standardize: bool = True,
             header: bool | None = None) -> Dataset:
    """Read a numeric CSV with one label column.

    Labels may be {-1, +1} or {0, 1}; zeros become -1.  Rows and columns in
    error messages are 1-based and count the header line if present.  With
    ``header=None`` the first line is treated as a header when none of its
    cells parse as numbers.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: no data")
    first = 1
    if header is None:
        header = all(not _is_number(c) for c in rows[0])
    if header:
        rows = rows[1:]
        first = 2
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise ValueError(f"{path}: need at least one feature and one label column")
    out = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        line = r + first
        if len(row) != width:
            raise ValueError(f"row {line}: expected {width} columns, found {len(row)}")
        for c, cell in enumerate(row):
            try:
                out[r, c] = float(cell)
            except ValueError:
                raise ValueError(f"row {line}, column {c + 1}: {cell.strip()!r} is not numeric") from None
            if not np.isfinite(out[r, c]):
                raise ValueError(f"row {line}, column {c + 1}: missing or non-finite value")
    lab_col = width - 1 if label_column_last else 0
    y = np.array([_parse_label(out[r, lab_col], r + first, lab_col + 1) for r in range(len(rows))])
    X = np.delete(out, lab_col, axis=1)
    std = None
    if standardize:
        std = Standardization.fit(X)
        X = std.apply(X)
    return Dataset(X, y, name=os.path.basename(str(path)), standardization=std)


def load_inputs_csv(path, d: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Inputs for prediction; a trailing label column is split off when present."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and all(not _is_number(c) for c in rows[0]):
        rows = rows[1:]
    try:
        A = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric cell ({exc})") from None
    if A.ndim != 2 or A.shape[0] == 0:
        raise ValueError(f"{path}: no rectangular numeric data")
    if A.shape[1] == d:
        return A, None
    if A.shape[1] == d + 1:
        return A[:, :d], np.where(A[:, d] == 0, -1.0, A[:, d])
    raise ValueError(f"{path}: expected {d} or {d + 1} columns, found {A.shape[1]}")


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def write_csv(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k + 1}" for k in range(data.d)] + ["y"])
        for x, y in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


# -- metrics and cross-validation ---------------------------------------------


def classification_error(prob, y) -> float:
    """Fraction of points whose predicted class disagrees with ``y``."""
    pred = np.where(np.asarray(prob) > 0.5, 1.0, -1.0)
    return float(np.mean(pred != np.asarray(y)))


def nlpd(mean, var, y) -> float:
    """Mean negative log predictive density of the labels under probit."""
    z = np.asarray(y) * np.asarray(mean) / np.sqrt(1.0 + np.asarray(var))
    return float(-np.mean(log_ndtr(z)))


def stratified_folds(y, k: int, seed: int = 0) -> np.ndarray:
    """Fold index per point; each class is spread evenly over the folds."""
    if k < 2:
        raise ValueError("need at least two folds")
    y = np.asarray(y)
    if k > y.size:
        raise ValueError("more folds than points")
    rng = rng_for(seed, 2)
    fold = np.empty(y.size, dtype=np.int64)
    offset = 0
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = (offset + np.arange(idx.size)) % k
        offset += idx.size
    return fold


@dataclass
class CvResult:
    errors: np.ndarray
    nlpds: np.ndarray
    thetas: list
    folds: np.ndarray

    @property
    def error(self) -> float:
        return float(np.mean(self.errors))

    @property
    def nlpd(self) -> float:
        return float(np.mean(self.nlpds))


def cross_validate(data: Dataset, folds: int, cfg: ModelConfig | None = None, seed: int = 0,
                   theta=None) -> CvResult:
    """k-fold error and nlpd with hyperparameters refit on every fold.

    With ``theta`` given the hyperparameters stay fixed and only EP is run.
    """
    cfg = cfg or ModelConfig()
    assign = stratified_folds(data.y, folds, seed)
    errs, nls, thetas = [], [], []
    for f in range(folds):
        test = assign == f
        train = ~test
        if np.unique(data.y[train]).size < 2 or np.unique(data.y[test]).size < 2:
            log.warning("event=single_class_fold fold=%d", f)
        clf = GPClassifier(cfg).fit(data.X[train], data.y[train], theta=theta)
        pred = clf.predict_latent(data.X[test])
        errs.append(classification_error(pred.prob, data.y[test]))
        nls.append(nlpd(pred.mean, pred.variance, data.y[test]))
        thetas.append(clf.fit_.theta)
        log.info("event=cv_fold fold=%d error=%.4f nlpd=%.4f", f, errs[-1], nls[-1])
    return CvResult(np.array(errs), np.array(nls), thetas, assign)


# -- fill statistics --------------------------------------------------------


@dataclass
class FillStats:
    fill_K: float
    fill_L: float
    explicit_zeros_K: int
    explicit_zeros_L: int


def fill_stats(K: SparseSymMatrix, L: LdlFactor | EliminationTree) -> FillStats:
    """Densities of K (over n^2) and of L (over the n(n+1)/2 lower triangle).

    Counts use stored patterns, so explicit zeros inside a pattern count as
    nonzeros; how many there are is reported alongside.  Given only the
    symbolic analysis, explicit zeros of L are reported as 0.
    """
    n = K.n
    if L.n != n:
        raise ValueError("factor and matrix sizes differ")
    nnz_L = L.nnz if isinstance(L, LdlFactor) else L.nnz_L
    zeros_L = int(np.count_nonzero(L.Lx == 0.0)) if isinstance(L, LdlFactor) else 0
    return FillStats(K.nnz / n ** 2, nnz_L / (n * (n + 1) / 2), int(np.count_nonzero(K.data == 0.0)), zeros_L)


# -- benchmarks ---------------------------------------------------------------

BENCH_SCHEMA = "csgpc-bench-2"
BENCH_FIELDS = [
    "schema", "scenario", "kind", "n", "seed", "d", "n_centers", "box_side", "n_test",
    "theta", "fill_K", "fill_L", "ep_backend", "ep_time", "opt_time", "sweeps", "opt_evals",
    "error", "nlpd", "skipped", "clamped", "refactorizations",
]


@dataclass
class BenchScenario:
    name: str = "bench"
    kinds: tuple = ("pp3", "se")
    sizes: tuple = (500, 1000, 2000)
    seeds: tuple = (0,)
    d: int = 2
    n_centers: int = 200
    box_side: float = 10.0
    n_test: int = 2000
    optimize: bool = True
    theta: tuple | None = None  # fixed hyperparameters when not optimizing
    timing_repeats: int = 3  # ep_time is the fastest of this many identical runs
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class BenchReport:
    scenario: str
    kind: str
    n: int
    seed: int
    theta: np.ndarray
    fill_K: float
    fill_L: float
    ep_backend: str
    ep_time: float
    opt_time: float
    sweeps: int
    opt_evals: int
    error: float
    nlpd: float
    skipped: int
    clamped: int
    refactorizations: int

    def row(self, sc: BenchScenario) -> dict:
        return {
            "schema": BENCH_SCHEMA, "scenario": self.scenario, "kind": self.kind, "n": self.n,
            "seed": self.seed, "d": sc.d, "n_centers": sc.n_centers, "box_side": sc.box_side,
            "n_test": sc.n_test, "theta": " ".join(repr(float(t)) for t in self.theta),
            "fill_K": self.fill_K, "fill_L": self.fill_L, "ep_backend": self.ep_backend,
            "ep_time": self.ep_time,
            "opt_time": self.opt_time, "sweeps": self.sweeps, "opt_evals": self.opt_evals,
            "error": self.error, "nlpd": self.nlpd, "skipped": self.skipped,
            "clamped": self.clamped, "refactorizations": self.refactorizations,
        }


def bench_cell(train: Dataset, test: Dataset, kind: str, sc: BenchScenario, seed: int) -> BenchReport:
    """Optimize (or fix) theta, then time EP runs from zero sites.

    The run uses the backend the model would use: the sparse path for
    compactly supported kernels, and under ``backend="auto"`` the dense
    reference EP for fully dense covariance matrices.
    """
    cfg = replace(sc.model, kind=kind)
    opt_time, evals = 0.0, 0
    if sc.optimize:
        t0 = time.perf_counter()
        fit = optimize(cfg, train.X, train.y)
        opt_time = time.perf_counter() - t0
        theta, evals = fit.theta, fit.result.n_evals
    else:
        theta = np.asarray(sc.theta if sc.theta is not None else [0.0] + [0.0] * train.d, dtype=float)
    hyp = Hyperparams.from_theta(kind, theta)
    bundle = build_kernel_matrix(train.X, hyp, jitter=cfg.jitter)
    dense = cfg.backend == "dense" or (cfg.backend == "auto" and bundle.K.is_dense)
    run = ep.run_dense_ep if dense else ep.run_sparse_ep
    ep_time = np.inf
    for _ in range(max(1, sc.timing_repeats)):
        # interference only adds time, so the minimum is the cleanest estimate
        t0 = time.perf_counter()
        state = run(bundle, train.y, cfg.ep)
        ep_time = min(ep_time, time.perf_counter() - t0)
    fs = fill_stats(bundle.K, state.factor if state.factor is not None else symbolic_analyze(bundle.K))
    pred = ep.predict(state, bundle, train.X, test.X, hyp)
    dg = state.diagnostics
    rep = BenchReport(sc.name, kind, train.n, seed, theta, fs.fill_K, fs.fill_L, "dense" if dense else "sparse",
                      ep_time, opt_time, state.sweeps, evals, classification_error(pred.prob, test.y),
                      nlpd(pred.mean, pred.variance, test.y), dg.skipped, dg.clamped, dg.refactorizations)
    log.info("event=bench_cell kind=%s n=%d seed=%d fill_K=%.4f fill_L=%.4f backend=%s ep_time=%.3f "
             "opt_time=%.3f error=%.4f", kind, rep.n, seed, rep.fill_K, rep.fill_L, rep.ep_backend, ep_time,
             opt_time, rep.error)
    return rep


def bench(sc: BenchScenario, results_path=None) -> list[BenchReport]:
    """Run every (seed, size, kind) cell; rows go to ``results_path`` if given."""
    reports = []
    for seed in sc.seeds:
        data = synth_clusters(max(sc.sizes) + sc.n_test, sc.d, sc.n_centers, sc.box_side, seed)
        train_all, test = holdout_split(data, sc.n_test, seed)
        for n in sc.sizes:
            train = train_all.subset(np.arange(n))
            for kind in sc.kinds:
                rep = bench_cell(train, test, kind, sc, seed)
                reports.append(rep)
                if results_path is not None:
                    append_results(results_path, [rep.row(sc)])
    return reports


def append_results(path, rows: list[dict]) -> None:
    """Append rows, writing the header for a new file and checking it otherwise."""
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    if exists:
        with open(path, newline="") as fh:
            head = next(csv.reader(fh), [])
        if head != BENCH_FIELDS:
            raise ValueError(f"{path}: header does not match schema {BENCH_SCHEMA}")
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        if not exists:
            w.writeheader()
        w.writerows(rows)
