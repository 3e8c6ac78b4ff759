"""Seeded generators, error metrics, and benchmark runners.

Regenerates the desk-scale simulation studies: single-matrix denoising over a
signal-to-noise grid, heterogeneous-signal denoising and imputation,
column-linked pairs, fully linked 2 x 2 grids with module-sparse truth, and a
cross-validated imputation benchmark for user grids.

Determinism contract: every generator takes a seed (or an explicit
``numpy.random.Generator``) and draws in a fixed, documented order, so a
fixed seed reproduces every dataset bit for bit on a fixed platform.
Replicates are seeded from independent spawned streams, which makes results
independent of worker scheduling when running with ``threads > 1``.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from joblib import Parallel, delayed

from evblink.decompose import (
    FitOptions,
    bidifac_plus,
    check_uniqueness,
    ev_bidifac,
)
from evblink.impute import em_impute_hard, em_impute_soft, linked_impute
from evblink.linked import BlockGrid, ModuleGrid, enumerate_modules
from evblink.shrinkage import (
    SvdTriple,
    estimate_sigma_spectrum,
    evb_shrink_values,
)

__all__ = [
    "ExperimentSpec",
    "ResultTable",
    "gen_single_fixed",
    "gen_hetero",
    "gen_two_linked",
    "gen_bidim",
    "rse",
    "onse",
    "rdse",
    "rse_miss",
    "rse_miss_blockwise",
    "mrse_miss",
    "run_experiment",
    "cv_impute",
    "SCENARIOS",
    "CV_METHODS",
]

SCENARIOS = (
    "single_fixed_s2n",
    "single_hetero",
    "two_linked",
    "two_linked_hetero",
    "bidim",
    "bidim_impute",
    "cv_impute",
)

CV_METHODS = ("evb_linked", "bidifac", "evb_separate", "evb_joint", "zero")

# benchmarks run the EM imputation fits slightly coarser than the library
# defaults; metric resolution is orders of magnitude above these tolerances
_IMPUTE_OPTS = FitOptions(rel_tolerance=1e-7, max_iterations=300)
_BASELINE_EM_TOL = 1e-6
_BASELINE_EM_MAXIT = 300


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _rng_of(seed, rng):
    if rng is not None:
        return rng
    return np.random.default_rng(seed)


def gen_single_fixed(c: float, m: int = 1000, n: int = 100, rank: int = 10,
                     seed=None, rng=None):
    """Planted fixed-scale signal: X = c * U V' + E, all entries standard
    normal. Draw order: U, V, E. Returns (X, S_true)."""
    if c <= 0:
        raise ValueError("signal scale c must be positive")
    g = _rng_of(seed, rng)
    u = g.standard_normal((m, rank))
    v = g.standard_normal((n, rank))
    e = g.standard_normal((m, n))
    s = c * (u @ v.T)
    return s + e, s


def _het_signal(m: int, n: int, rank: int, lo: float, hi: float, g) -> np.ndarray:
    """Signal with orthonormal factors and log-uniform singular values in
    [lo*sqrt(mn), hi*sqrt(mn)]. Draw order: U, V, singular values."""
    u = g.standard_normal((m, rank))
    v = g.standard_normal((n, rank))
    us, _, vts = np.linalg.svd(u @ v.T, full_matrices=False)
    scale = math.sqrt(m * n)
    d = np.exp(g.uniform(math.log(lo * scale), math.log(hi * scale), rank))
    return (us[:, :rank] * d) @ vts[:rank]


def gen_hetero(m: int = 1000, n: int = 100, rank: int = 10, lo: float = 0.05,
               hi: float = 1.0, seed=None, rng=None):
    """Heterogeneous-signal design: component strengths are log-uniform over
    [lo*sqrt(mn), hi*sqrt(mn)], so components range from dominant to
    undetectable. Returns (X, S_true)."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    g = _rng_of(seed, rng)
    s = _het_signal(m, n, rank, lo, hi, g)
    return s + g.standard_normal((m, n)), s


TWO_LINKED_ROWS = [500, 500]
TWO_LINKED_COLS = [100]
TWO_LINKED_RANK = 5


def gen_two_linked(c: float = 1.0, hetero: bool = False, seed=None, rng=None):
    """Two matrices sharing columns, stacked into 1000 x 100: shared
    structure spanning both row sets plus one specific structure per set,
    rank 5 each. Draw order: shared, specific set 0, specific set 1, noise.

    Returns ``(grid, module_grid, truth)`` with ``truth`` a list of full-size
    true module matrices aligned with ``module_grid`` columns.
    """
    g = _rng_of(seed, rng)
    m0, m1 = TWO_LINKED_ROWS
    n = TWO_LINKED_COLS[0]
    r = TWO_LINKED_RANK
    if hetero:
        s0 = _het_signal(m0 + m1, n, r, 0.05, 1.0, g)
        s1 = _het_signal(m0, n, r, 0.05, 1.0, g)
        s2 = _het_signal(m1, n, r, 0.05, 1.0, g)
    else:
        s0 = c * (g.standard_normal((m0 + m1, r)) @ g.standard_normal((n, r)).T)
        s1 = c * (g.standard_normal((m0, r)) @ g.standard_normal((n, r)).T)
        s2 = c * (g.standard_normal((m1, r)) @ g.standard_normal((n, r)).T)
    e = g.standard_normal((m0 + m1, n))
    modules = enumerate_modules(2, 1)
    truth = []
    for k in range(modules.n_modules):
        r_sel, _ = modules.footprint(k)
        full = np.zeros((m0 + m1, n))
        if r_sel.all():
            full[:] = s0
        elif r_sel[0]:
            full[:m0] = s1
        else:
            full[m0:] = s2
        truth.append(full)
    x = sum(truth) + e
    grid = BlockGrid.from_full(x, TWO_LINKED_ROWS, TWO_LINKED_COLS)
    return grid, modules, truth


BIDIM_ROWS = [500, 500]
BIDIM_COLS = [50, 50]
BIDIM_ACTIVE = 5
BIDIM_RANK = 2


def gen_bidim(seed=None, rng=None):
    """Fully linked 2 x 2 design: 5 of the 9 possible modules drawn uniformly
    carry rank-2 heterogeneous structure on their footprint, the other 4 are
    exactly zero. Draw order: active set, per active module (ascending index)
    the signal, then noise.

    Returns ``(grid, module_grid, truth, active)``.
    """
    g = _rng_of(seed, rng)
    modules = enumerate_modules(2, 2)
    active = sorted(int(k) for k in
                    g.choice(modules.n_modules, size=BIDIM_ACTIVE, replace=False))
    ro = np.concatenate([[0], np.cumsum(BIDIM_ROWS)])
    co = np.concatenate([[0], np.cumsum(BIDIM_COLS)])
    m, n = int(ro[-1]), int(co[-1])
    truth = [np.zeros((m, n)) for _ in range(modules.n_modules)]
    for k in active:
        r_sel, c_sel = modules.footprint(k)
        rows = np.concatenate([np.arange(ro[i], ro[i + 1])
                               for i in np.flatnonzero(r_sel)])
        cols = np.concatenate([np.arange(co[j], co[j + 1])
                               for j in np.flatnonzero(c_sel)])
        sub = _het_signal(rows.size, cols.size, BIDIM_RANK, 0.05, 1.0, g)
        truth[k][np.ix_(rows, cols)] = sub
    x = sum(truth) + g.standard_normal((m, n))
    grid = BlockGrid.from_full(x, BIDIM_ROWS, BIDIM_COLS)
    return grid, modules, truth, active


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0:
        raise ValueError(f"undefined metric: zero denominator in {what}")
    return float(num / den)


def rse(s_true: np.ndarray, s_hat: np.ndarray) -> float:
    """Relative squared error of an estimated structure."""
    return _ratio(np.sum((s_true - s_hat) ** 2), np.sum(s_true ** 2), "rse")


def onse(s_true: np.ndarray, s_hat: np.ndarray, s_opt: np.ndarray) -> float:
    """Squared error normalized by the oracle estimate's squared error."""
    return _ratio(np.sum((s_true - s_hat) ** 2),
                  np.sum((s_true - s_opt) ** 2), "onse")


def rdse(truth_modules, fitted_modules) -> float:
    """Relative squared error summed over the module-wise decomposition."""
    num = sum(np.sum((t - f) ** 2) for t, f in zip(truth_modules, fitted_modules))
    den = sum(np.sum(t ** 2) for t in truth_modules)
    return _ratio(num, den, "rdse")


def rse_miss(s_true: np.ndarray, s_hat: np.ndarray, mask: np.ndarray) -> float:
    """Relative squared error of the signal restricted to masked entries."""
    mask = np.asarray(mask, dtype=bool)
    return _ratio(np.sum((s_true[mask] - s_hat[mask]) ** 2),
                  np.sum(s_true[mask] ** 2), "rse_miss")


def rse_miss_blockwise(truth_modules, s_hat: np.ndarray, row_mask: np.ndarray,
                       col_mask: np.ndarray, module_grid: ModuleGrid) -> float:
    """Imputation error for whole-row / whole-column missingness.

    On row-missing entries only structure shared across every column set is
    estimable, and on column-missing entries only structure shared across
    every row set; the truth is restricted accordingly on each part.
    """
    col_shared = module_grid.col_indicator.all(axis=0)
    row_shared = module_grid.row_indicator.all(axis=0)
    s_c = sum((t for t, keep in zip(truth_modules, col_shared) if keep),
              np.zeros_like(s_hat))
    s_r = sum((t for t, keep in zip(truth_modules, row_shared) if keep),
              np.zeros_like(s_hat))
    row_mask = np.asarray(row_mask, dtype=bool)
    col_mask = np.asarray(col_mask, dtype=bool)
    num = (np.sum((s_c[row_mask] - s_hat[row_mask]) ** 2)
           + np.sum((s_r[col_mask] - s_hat[col_mask]) ** 2))
    den = np.sum(s_c[row_mask] ** 2) + np.sum(s_r[col_mask] ** 2)
    return _ratio(num, den, "rse_miss_blockwise")


def mrse_miss(grid: BlockGrid, s_hat: np.ndarray, mask: np.ndarray) -> float:
    """Observed-data relative squared error at masked entries, averaged over
    the blocks that have masked entries."""
    mask = np.asarray(mask, dtype=bool)
    ro, co = grid.row_offsets, grid.col_offsets
    vals = []
    for i in range(grid.n_row_sets):
        for j in range(grid.n_col_sets):
            bm = mask[ro[i]:ro[i + 1], co[j]:co[j + 1]]
            if not bm.any():
                continue
            x = grid.block(i, j)[bm]
            sh = s_hat[ro[i]:ro[i + 1], co[j]:co[j + 1]][bm]
            vals.append(_ratio(np.sum((x - sh) ** 2), np.sum(x ** 2),
                               f"mrse_miss block ({i},{j})"))
    if not vals:
        raise ValueError("undefined metric: no masked entries")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# result table
# ---------------------------------------------------------------------------


@dataclass
class ResultTable:
    """Flat metric table: rows of (scenario, method, replicate, metric, value).

    ``metadata`` records the seed, dimensions and wall time of the run; wall
    time is excluded from serialized output so files are byte-identical
    across repeated runs with the same seed.
    """

    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self._seen = {(sc, me, rep, mt) for (sc, me, rep, mt, _) in self.rows}

    def add(self, scenario: str, method: str, replicate: int, metric: str,
            value: float) -> None:
        key = (scenario, method, int(replicate), metric)
        if key in self._seen:
            raise ValueError(f"duplicate result row {key}")
        self._seen.add(key)
        self.rows.append((*key, float(value)))

    def extend(self, rows) -> None:
        for r in rows:
            self.add(*r)

    def values(self, metric: str, method: str | None = None,
               scenario: str | None = None) -> np.ndarray:
        picked = [(rep, val) for (sc, me, rep, mt, val) in self.rows
                  if mt == metric
                  and (method is None or me == method)
                  and (scenario is None or sc == scenario)]
        picked.sort()
        return np.array([v for _, v in picked])

    def methods(self) -> list:
        return sorted({me for (_, me, _, _, _) in self.rows})

    def to_tsv(self) -> str:
        lines = ["scenario\tmethod\treplicate\tmetric\tvalue"]
        for sc, me, rep, mt, val in self.rows:
            lines.append(f"{sc}\t{me}\t{rep}\t{mt}\t{val!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        groups: dict = {}
        for sc, me, rep, mt, val in self.rows:
            groups.setdefault((sc, me, mt), []).append(val)
        out = {}
        for (sc, me, mt), vals in sorted(groups.items()):
            arr = np.array(vals)
            out[f"{sc}|{me}|{mt}"] = {
                "median": float(np.median(arr)),
                "q25": float(np.quantile(arr, 0.25)),
                "q75": float(np.quantile(arr, 0.75)),
                "mean": float(arr.mean()),
                "n": int(arr.size),
            }
        return out

    def public_metadata(self) -> dict:
        return {k: v for k, v in self.metadata.items() if k != "wall_time_s"}


# ---------------------------------------------------------------------------
# experiment spec and runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """Parameters of one benchmark run.

    The signal-strength grid (``n_c`` points, log-uniform in
    ``[c_lo, c_hi]``) applies to the fixed-scale scenarios; ``m``, ``n`` and
    ``rank`` to the single-matrix scenarios; ``missing_fracs`` adds
    imputation at those entrywise levels to the heterogeneous scenario.
    ``oracle_impute_sweeps`` additionally runs the grid-swept soft/hard EM
    imputation baselines (slow). ``replicates`` counts per grid point for
    grid scenarios, total otherwise.
    """

    scenario: str
    replicates: int = 20
    rng_seed: int = 0
    m: int = 1000
    n: int = 100
    rank: int = 10
    n_c: int = 10
    c_lo: float = 0.05
    c_hi: float = 1.0
    het_lo: float = 0.05
    het_hi: float = 1.0
    missing_fracs: tuple = ()
    oracle_impute_sweeps: bool = False
    lambda_grid_size: int = 50
    threads: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; "
                             f"choose from {SCENARIOS}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not (0 < self.c_lo < self.c_hi):
            raise ValueError("need 0 < c_lo < c_hi")
        if any(not 0 < f < 1 for f in self.missing_fracs):
            raise ValueError("missing fractions must be in (0, 1)")

    def c_grid(self) -> np.ndarray:
        return np.geomspace(self.c_lo, self.c_hi, self.n_c)


def _signal_projection(svd: SvdTriple, s_true: np.ndarray):
    """Squared-error geometry of diagonal estimates in the observed basis:
    err(dhat) = |S|^2 - 2 dhat.t + |dhat|^2 with t_r = u_r' S v_r."""
    t = np.sum(svd.left_vectors * (s_true @ svd.right_vectors), axis=0)
    return float(np.sum(s_true ** 2)), t


def _diag_err(dhat: np.ndarray, s2: float, t: np.ndarray) -> float:
    return s2 - 2.0 * float(dhat @ t) + float(dhat @ dhat)


def _single_methods(x: np.ndarray, s_true: np.ndarray, rank: int,
                    with_oracle_sweeps: bool, lambda_grid_size: int):
    """Errors of the single-matrix estimators, all from one SVD of x."""
    m, n = x.shape
    svd = SvdTriple.from_matrix(x)
    d = svd.singular_values
    s2, t = _signal_projection(svd, s_true)
    sigma_hat = estimate_sigma_spectrum(d, m, n).sigma_hat

    dhat = {}
    dhat["evb"] = evb_shrink_values(d, m, n, sigma_hat)
    ht = d.copy()
    ht[rank:] = 0.0
    dhat["ht"] = ht
    dhat["nn"] = np.maximum(d - (math.sqrt(m) + math.sqrt(n)), 0.0)
    dhat["opt"] = np.maximum(t, 0.0)
    errors = {name: _diag_err(v, s2, t) for name, v in dhat.items()}

    if with_oracle_sweeps:
        # best rank on the full grid 0..min(m,n)
        prefix = np.concatenate([[0.0], np.cumsum(2.0 * d * t - d * d)])
        errors["ht_opt"] = float(np.min(s2 - prefix))
        lam_grid = np.geomspace(d[0] * 1e-3, d[0], lambda_grid_size)
        errors["nn_opt"] = min(
            _diag_err(np.maximum(d - lam, 0.0), s2, t) for lam in lam_grid)
    return errors, s2, svd, sigma_hat


def _entry_mask(shape, frac: float, g) -> np.ndarray:
    m, n = shape
    count = int(round(frac * m * n))
    mask = np.zeros(m * n, dtype=bool)
    mask[g.choice(m * n, size=count, replace=False)] = True
    return mask.reshape(m, n)


def _single_fixed_rows(spec: ExperimentSpec, index: int, g) -> list:
    c = float(spec.c_grid()[index // spec.replicates])
    x, s = gen_single_fixed(c, spec.m, spec.n, spec.rank, rng=g)
    errors, s2, _, _ = _single_methods(x, s, spec.rank, False,
                                       spec.lambda_grid_size)
    rows = []
    for name, err in errors.items():
        rows.append((spec.scenario, name, index, "s2n_c", c))
        rows.append((spec.scenario, name, index, "rse", err / s2))
        rows.append((spec.scenario, name, index, "onse", err / errors["opt"]))
    return rows


def _em_sweep_best(x, mask, s_true, kind: str, lambda_grid_size: int) -> float:
    """Best masked-signal error over the full parameter grid of an EM
    imputation family, with warm starts along the grid."""
    fill0 = x.copy()
    fill0[mask] = 0.0
    init = None
    best = math.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if kind == "soft":
            d1 = float(np.linalg.svd(fill0, compute_uv=False)[0])
            grid = np.geomspace(d1, d1 * 1e-3, lambda_grid_size)
            for lam in grid:
                init = em_impute_soft(x, mask, lam, _BASELINE_EM_TOL,
                                      _BASELINE_EM_MAXIT, init=init)
                best = min(best, rse_miss(s_true, init, mask))
        else:
            for r in range(0, min(x.shape) + 1):
                init = em_impute_hard(x, mask, r, _BASELINE_EM_TOL,
                                      _BASELINE_EM_MAXIT, init=init)
                best = min(best, rse_miss(s_true, init, mask))
    return best


def _single_hetero_rows(spec: ExperimentSpec, index: int, g) -> list:
    x, s = gen_hetero(spec.m, spec.n, spec.rank, spec.het_lo, spec.het_hi,
                      rng=g)
    errors, s2, _, _ = _single_methods(x, s, spec.rank, True,
                                       spec.lambda_grid_size)
    rows = []
    for name, err in errors.items():
        rows.append((spec.scenario, name, index, "rse", err / s2))
        rows.append((spec.scenario, name, index, "onse", err / errors["opt"]))
    opt_rse = errors["opt"] / s2

    modules_single = enumerate_modules(1, 1)
    for frac in spec.missing_fracs:
        tag = f"{int(round(frac * 100))}"
        mask = _entry_mask(x.shape, frac, g)
        grid = BlockGrid.from_full(x, [spec.m], [spec.n], mask=mask)
        _, imputed = linked_impute(grid, modules_single, _IMPUTE_OPTS)
        level = {"evb": rse_miss(s, imputed, mask)}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            soft = em_impute_soft(x, mask, math.sqrt(spec.m) + math.sqrt(spec.n),
                                  _BASELINE_EM_TOL, _BASELINE_EM_MAXIT)
            hard = em_impute_hard(x, mask, spec.rank,
                                  _BASELINE_EM_TOL, _BASELINE_EM_MAXIT)
        level["soft_em"] = rse_miss(s, soft, mask)
        level["hard_em"] = rse_miss(s, hard, mask)
        if spec.oracle_impute_sweeps:
            level["soft_em_opt"] = _em_sweep_best(x, mask, s, "soft",
                                                  spec.lambda_grid_size)
            level["hard_em_opt"] = _em_sweep_best(x, mask, s, "hard",
                                                  spec.lambda_grid_size)
        for name, val in level.items():
            rows.append((spec.scenario, name, index, f"rse_miss_{tag}", val))
            rows.append((spec.scenario, name, index, f"onse_miss_{tag}",
                         val / opt_rse))
    return rows


def _fitted_modules(decomp) -> list:
    return [decomp.module_full(k) for k in range(decomp.n_modules)]


def _two_linked_rows(spec: ExperimentSpec, index: int, g) -> list:
    hetero = spec.scenario == "two_linked_hetero"
    if hetero:
        c = None
        grid, modules, truth = gen_two_linked(hetero=True, rng=g)
    else:
        c = float(spec.c_grid()[index // spec.replicates])
        grid, modules, truth = gen_two_linked(c=c, rng=g)
    s_tot = sum(truth)
    fits = {
        "evb": ev_bidifac(grid, modules),
        "bidifac": bidifac_plus(grid, modules,
                                opts=FitOptions(sigma_mode="user", sigma=1.0)),
    }
    rows = []
    for name, dec in fits.items():
        mods = _fitted_modules(dec)
        if c is not None:
            rows.append((spec.scenario, name, index, "s2n_c", c))
        rows.append((spec.scenario, name, index, "rse", rse(s_tot, sum(mods))))
        rows.append((spec.scenario, name, index, "rdse", rdse(truth, mods)))
    return rows


def _evb_separate(grid: BlockGrid) -> np.ndarray:
    """Shrinkage of every block on its own, assembled at full size."""
    modules_single = enumerate_modules(1, 1)
    out = np.zeros(grid.shape)
    ro, co = grid.row_offsets, grid.col_offsets
    for i in range(grid.n_row_sets):
        for j in range(grid.n_col_sets):
            sub = BlockGrid.from_full(grid.block(i, j),
                                      [grid.row_set_sizes[i]],
                                      [grid.col_set_sizes[j]])
            dec = ev_bidifac(sub, modules_single)
            out[ro[i]:ro[i + 1], co[j]:co[j + 1]] = dec.total_structure()
    return out


def _bidim_rows(spec: ExperimentSpec, index: int, g) -> list:
    grid, modules, truth, active = gen_bidim(rng=g)
    s_tot = sum(truth)
    rows = []

    dec = ev_bidifac(grid, modules)
    mods = _fitted_modules(dec)
    rows.append((spec.scenario, "evb_linked", index, "rse", rse(s_tot, sum(mods))))
    rows.append((spec.scenario, "evb_linked", index, "rdse", rdse(truth, mods)))
    zero_truth = [k for k in range(modules.n_modules) if k not in active]
    rows.append((spec.scenario, "evb_linked", index, "n_zero_truth",
                 len(zero_truth)))
    rows.append((spec.scenario, "evb_linked", index, "n_zero_correct",
                 sum(dec.module_rank(k) == 0 for k in zero_truth)))
    rows.append((spec.scenario, "evb_linked", index, "n_nonzero_truth",
                 len(active)))
    rows.append((spec.scenario, "evb_linked", index, "n_nonzero_detected",
                 sum(dec.module_rank(k) > 0 for k in active)))
    rows.append((spec.scenario, "evb_linked", index, "uniqueness_ok",
                 int(check_uniqueness(dec).overall_ok)))

    dec_b = bidifac_plus(grid, modules,
                         opts=FitOptions(sigma_mode="user", sigma=1.0))
    mods_b = _fitted_modules(dec_b)
    rows.append((spec.scenario, "bidifac", index, "rse", rse(s_tot, sum(mods_b))))
    rows.append((spec.scenario, "bidifac", index, "rdse", rdse(truth, mods_b)))

    rows.append((spec.scenario, "evb_separate", index, "rse",
                 rse(s_tot, _evb_separate(grid))))
    full = BlockGrid.from_full(grid.full(), [sum(BIDIM_ROWS)], [sum(BIDIM_COLS)])
    dec_j = ev_bidifac(full, enumerate_modules(1, 1))
    rows.append((spec.scenario, "evb_joint", index, "rse",
                 rse(s_tot, dec_j.total_structure())))
    return rows


def _blockwise_masks(grid: BlockGrid, row_frac: float, col_frac: float, g):
    """Whole-row and whole-column masks per block. Draw order: blocks in row
    major order, rows before columns."""
    m, n = grid.shape
    row_mask = np.zeros((m, n), dtype=bool)
    col_mask = np.zeros((m, n), dtype=bool)
    ro, co = grid.row_offsets, grid.col_offsets
    for i in range(grid.n_row_sets):
        for j in range(grid.n_col_sets):
            mi, nj = grid.row_set_sizes[i], grid.col_set_sizes[j]
            rows = g.choice(mi, size=int(round(row_frac * mi)), replace=False)
            cols = g.choice(nj, size=int(round(col_frac * nj)), replace=False)
            row_mask[ro[i] + rows, co[j]:co[j + 1]] = True
            col_mask[ro[i]:ro[i + 1], co[j] + cols] = True
    return row_mask, col_mask


def _impute_methods_linked(grid: BlockGrid, modules: ModuleGrid,
                           opts: FitOptions = _IMPUTE_OPTS,
                           true_sigma: float | None = 1.0) -> dict:
    """The linked, soft-linked, separate and joint imputations of a masked
    grid; returns imputed full matrices keyed by method name. ``true_sigma``
    fixes the soft baseline's noise scale (simulations know it is 1);
    ``None`` estimates it from the data."""
    out = {}
    _, out["evb_linked"] = linked_impute(grid, modules, opts, rule="evb")
    if true_sigma is None:
        soft_opts = opts
    else:
        soft_opts = FitOptions(rel_tolerance=opts.rel_tolerance,
                               max_iterations=opts.max_iterations,
                               sigma_mode="user", sigma=true_sigma)
    _, out["bidifac"] = linked_impute(grid, modules, soft_opts, rule="soft")
    modules_single = enumerate_modules(1, 1)
    sep = np.zeros(grid.shape)
    ro, co = grid.row_offsets, grid.col_offsets
    for i in range(grid.n_row_sets):
        for j in range(grid.n_col_sets):
            sub = BlockGrid.from_full(grid.block(i, j),
                                      [grid.row_set_sizes[i]],
                                      [grid.col_set_sizes[j]],
                                      mask=grid.block_mask(i, j))
            _, imp = linked_impute(sub, modules_single, opts)
            sep[ro[i]:ro[i + 1], co[j]:co[j + 1]] = imp
    out["evb_separate"] = sep
    joint = BlockGrid.from_full(grid.full(), [grid.shape[0]], [grid.shape[1]],
                                mask=grid.mask)
    _, out["evb_joint"] = linked_impute(joint, modules_single, opts)
    return out


def _bidim_impute_rows(spec: ExperimentSpec, index: int, g) -> list:
    grid, modules, truth, _ = gen_bidim(rng=g)
    s_tot = sum(truth)
    x = grid.full()
    # entrywise variant: 20% of each block
    entry_mask = np.zeros(grid.shape, dtype=bool)
    ro, co = grid.row_offsets, grid.col_offsets
    for i in range(grid.n_row_sets):
        for j in range(grid.n_col_sets):
            bm = _entry_mask((grid.row_set_sizes[i], grid.col_set_sizes[j]),
                             0.2, g)
            entry_mask[ro[i]:ro[i + 1], co[j]:co[j + 1]] = bm
    row_mask, col_mask = _blockwise_masks(grid, 0.1, 0.1, g)

    rows = []
    grid_e = BlockGrid.from_full(x, BIDIM_ROWS, BIDIM_COLS, mask=entry_mask)
    for name, imp in _impute_methods_linked(grid_e, modules).items():
        rows.append((spec.scenario, name, index, "rse_miss_entry",
                     rse_miss(s_tot, imp, entry_mask)))
    grid_b = BlockGrid.from_full(x, BIDIM_ROWS, BIDIM_COLS,
                                 mask=row_mask | col_mask)
    for name, imp in _impute_methods_linked(grid_b, modules).items():
        rows.append((spec.scenario, name, index, "rse_miss_block",
                     rse_miss_blockwise(truth, imp, row_mask, col_mask,
                                        modules)))
    return rows


_SCENARIO_TASKS = {
    "single_fixed_s2n": _single_fixed_rows,
    "single_hetero": _single_hetero_rows,
    "two_linked": _two_linked_rows,
    "two_linked_hetero": _two_linked_rows,
    "bidim": _bidim_rows,
    "bidim_impute": _bidim_impute_rows,
}


def _replicate(spec: ExperimentSpec, index: int, seed_seq):
    g = np.random.default_rng(seed_seq)
    try:
        return _SCENARIO_TASKS[spec.scenario](spec, index, g), None
    except Exception as exc:  # recorded, run continues
        return [], f"replicate {index}: {type(exc).__name__}: {exc}"


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    """Run every in-scope method of the chosen scenario over seeded
    replicates and collect the metric table.

    Replicates use independent spawned seed streams, so the table is
    identical for any ``threads`` setting; per-replicate failures are
    recorded in ``metadata['errors']`` and the run continues.
    """
    if spec.scenario == "cv_impute":
        raise ValueError(
            "the cross-validated imputation benchmark runs on user data; "
            "call cv_impute(grid, ...) or the cv-impute command")
    t0 = time.perf_counter()
    grid_scenarios = ("single_fixed_s2n", "two_linked")
    n_tasks = (spec.n_c * spec.replicates if spec.scenario in grid_scenarios
               else spec.replicates)
    children = np.random.SeedSequence(spec.rng_seed).spawn(n_tasks)
    if spec.threads > 1:
        results = Parallel(n_jobs=spec.threads)(
            delayed(_replicate)(spec, i, ch) for i, ch in enumerate(children))
    else:
        results = [_replicate(spec, i, ch) for i, ch in enumerate(children)]
    table = ResultTable(metadata={
        "spec": asdict(spec),
        "n_tasks": n_tasks,
        "errors": [],
    })
    for rows, err in results:
        table.extend(rows)
        if err is not None:
            table.metadata["errors"].append(err)
    table.metadata["wall_time_s"] = time.perf_counter() - t0
    return table


# ---------------------------------------------------------------------------
# cross-validated imputation benchmark
# ---------------------------------------------------------------------------


def _cv_fold_masks(grid: BlockGrid, col_frac, row_frac, entry_frac, g,
                   union: np.ndarray):
    """Per-fold masks: whole columns, whole rows, then scattered entries of
    each block. Redraws a block's proposal if it would complete the union of
    all folds' masks over that block."""
    m, n = grid.shape
    row_mask = np.zeros((m, n), dtype=bool)
    col_mask = np.zeros((m, n), dtype=bool)
    entry_mask = np.zeros((m, n), dtype=bool)
    ro, co = grid.row_offsets, grid.col_offsets
    for i in range(grid.n_row_sets):
        for j in range(grid.n_col_sets):
            mi, nj = grid.row_set_sizes[i], grid.col_set_sizes[j]
            bu = union[ro[i]:ro[i + 1], co[j]:co[j + 1]]
            for _ in range(100):
                cols = g.choice(nj, size=int(round(col_frac * nj)),
                                replace=False)
                rows = g.choice(mi, size=int(round(row_frac * mi)),
                                replace=False)
                bm_rows = np.zeros((mi, nj), dtype=bool)
                bm_rows[rows, :] = True
                bm_cols = np.zeros((mi, nj), dtype=bool)
                bm_cols[:, cols] = True
                remaining = np.flatnonzero(~(bm_rows | bm_cols).ravel())
                k = int(round(entry_frac * remaining.size))
                picked = g.choice(remaining.size, size=k, replace=False)
                bm_entries = np.zeros(mi * nj, dtype=bool)
                bm_entries[remaining[picked]] = True
                bm_entries = bm_entries.reshape(mi, nj)
                if not (bu | bm_rows | bm_cols | bm_entries).all():
                    break
            else:
                raise ValueError(
                    f"could not mask block ({i},{j}) without exhausting it; "
                    "reduce the fold fractions")
            row_mask[ro[i]:ro[i + 1], co[j]:co[j + 1]] = bm_rows
            col_mask[ro[i]:ro[i + 1], co[j]:co[j + 1]] = bm_cols
            entry_mask[ro[i]:ro[i + 1], co[j]:co[j + 1]] = bm_entries
    return row_mask, col_mask, entry_mask


def _cv_fold_rows(grid: BlockGrid, modules: ModuleGrid, opts: FitOptions,
                  f: int, masks) -> list:
    row_mask, col_mask, entry_mask = masks
    mask = row_mask | col_mask | entry_mask
    grid_f = BlockGrid.from_full(grid.full(), grid.row_set_sizes,
                                 grid.col_set_sizes, mask=mask)
    # noise scales are estimated from the data (no simulation truth here)
    imputed = _impute_methods_linked(grid_f, modules, opts, true_sigma=None)
    zero = grid_f.full().copy()
    zero[mask] = 0.0
    imputed["zero"] = zero
    rows = []
    parts = {"col": col_mask, "row": row_mask, "entry": entry_mask,
             "overall": mask}
    for name in CV_METHODS:
        for part, pm in parts.items():
            if pm.any():
                rows.append(("cv_impute", name, f, f"mrse_miss_{part}",
                             mrse_miss(grid, imputed[name], pm)))
    return rows


def cv_impute(grid: BlockGrid, modules: ModuleGrid | None = None,
              folds: int = 20, col_frac: float = 0.05, row_frac: float = 0.05,
              entry_frac: float = 0.05, seed: int = 0, threads: int = 1,
              opts: FitOptions | None = None) -> ResultTable:
    """Cross-validated imputation benchmark on a fully observed user grid.

    Each fold masks whole columns, whole rows, and scattered entries of every
    block at the requested fractions, imputes with the linked, separate,
    joint and predict-zero methods, and reports the observed-data error
    split by missingness type (plus overall). Folds are independent seeded
    draws; the union of all folds' masks never exhausts a block.
    """
    if grid.mask is not None and np.any(grid.mask):
        raise ValueError("cross-validation requires a fully observed grid")
    if modules is None:
        modules = enumerate_modules(grid.n_row_sets, grid.n_col_sets)
    opts = opts or _IMPUTE_OPTS
    t0 = time.perf_counter()
    children = np.random.SeedSequence(seed).spawn(folds)
    union = np.zeros(grid.shape, dtype=bool)
    fold_masks = []
    for ch in children:
        g = np.random.default_rng(ch)
        masks = _cv_fold_masks(grid, col_frac, row_frac, entry_frac, g, union)
        union |= masks[0] | masks[1] | masks[2]
        fold_masks.append(masks)

    if threads > 1:
        all_rows = Parallel(n_jobs=threads)(
            delayed(_cv_fold_rows)(grid, modules, opts, f, fold_masks[f])
            for f in range(folds))
    else:
        all_rows = [_cv_fold_rows(grid, modules, opts, f, fold_masks[f])
                    for f in range(folds)]
    table = ResultTable(metadata={
        "folds": folds, "col_frac": col_frac, "row_frac": row_frac,
        "entry_frac": entry_frac, "seed": seed,
        "row_set_sizes": list(grid.row_set_sizes),
        "col_set_sizes": list(grid.col_set_sizes),
        "errors": [],
    })
    for rows in all_rows:
        table.extend(rows)
    table.metadata["wall_time_s"] = time.perf_counter() - t0
    return table
