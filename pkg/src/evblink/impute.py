"""EM-style imputation for linked block grids and single matrices.

The linked imputation loop alternates two steps on noise-scaled data: fill
missing entries with the current fitted structure, then run one cyclic module
sweep. Observed entries are never modified, and at convergence the imputed
values equal the fitted structure at the missing positions exactly.

Two noise-scale strategies, chosen per block from the missingness pattern:
blocks with whole missing rows or columns use a fixed estimate from their
fully observed sub-rows and sub-columns; blocks with scattered missing
entries re-estimate between convergence passes from the currently imputed
block, with a variance correction for the fitted (noise-free) entries.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from evblink.decompose import (
    FitOptions,
    SIGMA_USER,
    Workspace,
    _evb_rule,
    default_lambdas,
    ev_bidifac,
    bidifac_plus,
    rel_change,
    resolve_sigma,
)
from evblink.linked import BlockGrid, Decomposition, FitMeta, ModuleGrid
from evblink.shrinkage import (
    estimate_sigma,
    hard_threshold_matrix,
    soft_threshold_matrix,
)

__all__ = [
    "MissingPattern",
    "classify_pattern",
    "completion_inflation",
    "sigma_for_missing",
    "ev_bidifac_impute",
    "linked_impute",
    "em_impute_soft",
    "em_impute_hard",
]

KIND_ENTRYWISE = "entrywise"
KIND_BLOCKWISE = "blockwise"
KIND_MIXED = "mixed"


@dataclass(frozen=True)
class MissingPattern:
    """Classified missingness of a block grid.

    ``missing_rows[(i, j)]`` / ``missing_cols[(i, j)]`` list the block-local
    rows/columns of block (i, j) that are missing in their entirety;
    remaining masked entries are entrywise. Fully missing blocks are
    rejected at classification time.
    """

    kind: str
    mask: np.ndarray
    per_block_counts: np.ndarray
    missing_rows: dict
    missing_cols: dict
    entrywise_counts: np.ndarray

    @property
    def n_missing(self) -> int:
        return int(self.mask.sum())

    def has_blockwise(self, i: int, j: int) -> bool:
        return (i, j) in self.missing_rows or (i, j) in self.missing_cols


def classify_pattern(grid: BlockGrid) -> MissingPattern:
    """Split a grid's mask into blockwise (whole row/column) and entrywise parts.

    ``entrywise_counts`` counts the masked entries of each block that remain
    after removing its fully missing rows and columns.
    """
    m, n = grid.shape
    mask = (np.zeros((m, n), dtype=bool) if grid.mask is None
            else np.asarray(grid.mask, dtype=bool))
    counts = np.zeros((grid.n_row_sets, grid.n_col_sets), dtype=int)
    entry_counts = np.zeros_like(counts)
    missing_rows, missing_cols = {}, {}
    any_blockwise = any_entrywise = False
    ro, co = grid.row_offsets, grid.col_offsets
    for i in range(grid.n_row_sets):
        for j in range(grid.n_col_sets):
            bm = mask[ro[i]:ro[i + 1], co[j]:co[j + 1]]
            counts[i, j] = int(bm.sum())
            if counts[i, j] == bm.size:
                raise ValueError(f"block ({i},{j}) is entirely missing")
            rows = np.flatnonzero(bm.all(axis=1))
            cols = np.flatnonzero(bm.all(axis=0))
            if rows.size:
                missing_rows[(i, j)] = rows
            if cols.size:
                missing_cols[(i, j)] = cols
            blockwise_part = np.zeros_like(bm)
            blockwise_part[rows, :] = True
            blockwise_part[:, cols] = True
            if rows.size or cols.size:
                any_blockwise = True
            entry_counts[i, j] = int(np.sum(bm & ~blockwise_part))
            if entry_counts[i, j]:
                any_entrywise = True
    if any_blockwise and any_entrywise:
        kind = KIND_MIXED
    elif any_blockwise:
        kind = KIND_BLOCKWISE
    else:
        kind = KIND_ENTRYWISE
    return MissingPattern(kind, mask, counts, missing_rows, missing_cols,
                          entry_counts)


def completion_inflation(size: int, n_missing: int) -> float:
    """Noise-scale correction for a block whose missing entries carry fitted
    (noise-free) values: the raw estimate sees only the observed fraction of
    the noise variance, so the variance is inflated by size/(size - missing)
    and the scale by its square root."""
    return math.sqrt(size / (size - n_missing))


def _block_sigma(grid: BlockGrid, pattern: MissingPattern, i: int, j: int,
                 filled: np.ndarray | None, inflate: bool) -> float:
    """Noise scale of one block under its missingness strategy."""
    ro, co = grid.row_offsets, grid.col_offsets
    block = grid.block(i, j)
    bm = pattern.mask[ro[i]:ro[i + 1], co[j]:co[j + 1]]
    n_miss = int(bm.sum())
    if n_miss == 0:
        return estimate_sigma(block).sigma_hat

    keep_rows = np.setdiff1d(np.arange(block.shape[0]),
                             pattern.missing_rows.get((i, j), ()))
    keep_cols = np.setdiff1d(np.arange(block.shape[1]),
                             pattern.missing_cols.get((i, j), ()))
    if keep_rows.size < 2 or keep_cols.size < 2:
        raise ValueError(
            f"block ({i},{j}) has fewer than 2 observed rows or columns; "
            "supply noise scales via sigma_mode='user'"
        )
    n_entry = int(pattern.entrywise_counts[i, j])
    if n_entry == 0:
        # purely blockwise: the remaining sub-rows x sub-columns are complete
        return estimate_sigma(block[np.ix_(keep_rows, keep_cols)]).sigma_hat
    # scattered missingness (possibly after removing whole rows/columns):
    # estimate from the remainder with current imputations and correct for
    # the fitted (noise-free) entries
    src = block if filled is None else filled[ro[i]:ro[i + 1], co[j]:co[j + 1]]
    sub = src[np.ix_(keep_rows, keep_cols)]
    if filled is None:
        sub = sub.copy()
        sub[bm[np.ix_(keep_rows, keep_cols)]] = 0.0
    value = estimate_sigma(sub).sigma_hat
    if inflate:
        value *= completion_inflation(sub.size, n_entry)
    return value


def sigma_for_missing(grid: BlockGrid, pattern: MissingPattern,
                      filled: np.ndarray | None = None,
                      inflate_entrywise: bool = True) -> np.ndarray:
    """Per-block noise scales under missing data.

    Purely blockwise blocks (whole rows/columns missing): estimate from the
    remaining sub-rows x sub-columns, which are fully observed. Blocks with
    scattered missing entries: estimate from the block (less any fully
    missing rows/columns) with current imputations (``filled``, zeros at
    missing positions when not given), inflated by ``completion_inflation``.
    Fully observed blocks: plain estimate.

    ``inflate_entrywise=False`` skips the inflation; the imputation loop uses
    it for the very first scaling, where the missing entries hold zeros
    rather than fitted values and the deletion distortion already inflates
    the raw estimate.
    """
    sigma = np.empty((grid.n_row_sets, grid.n_col_sets))
    for i in range(grid.n_row_sets):
        for j in range(grid.n_col_sets):
            sigma[i, j] = _block_sigma(grid, pattern, i, j, filled,
                                       inflate_entrywise)
    return sigma


# the penalized warm stage only seeds the shrinkage stage, so it runs at a
# coarser tolerance than the decomposition warm start
IMPUTE_WARM_TOL = 1e-4
# relative stability of the per-block noise scales across refit rounds
SIGMA_ROUND_TOL = 1e-3
MAX_SIGMA_ROUNDS = 20


def linked_impute(grid: BlockGrid, modules: ModuleGrid,
                  opts: FitOptions | None = None, rule: str = "evb",
                  lambdas=None, order=None, warm_start: bool = True):
    """Alternating impute-and-sweep fit for a grid with missing entries.

    ``rule`` selects the module update: "evb" (closed-form shrinkage at unit
    scale) or "soft" (soft thresholding with ``lambdas``, defaulting to the
    size-based penalties). For "evb" a penalized warm stage first runs the
    same loop with soft updates, for the reasons described on ``ev_bidifac``
    (and because it helps the EM bootstrap weak signal under heavy
    missingness).

    Noise scales of blocks with scattered missing entries are re-estimated
    between convergence passes: the inner loop runs at fixed scales until the
    imputations stabilize, then each such block's scale is re-estimated from
    its imputed content and inflated by ``completion_inflation``, and the fit
    resumes, until the scales themselves stabilize. Re-estimating every
    sweep instead is unstable at heavy missingness: the inflation assumes the
    missing entries carry converged fits, and applying it to half-built fits
    raises the detection threshold faster than components can build up,
    collapsing the fit to zero.

    Returns ``(Decomposition, imputed M x N matrix)``; the imputed matrix
    equals the input at observed entries and the fitted structure at missing
    ones.
    """
    opts = opts or FitOptions()
    pattern = classify_pattern(grid)
    if pattern.n_missing == 0:
        if rule == "evb":
            decomp = ev_bidifac(grid, modules, opts, order=order,
                                warm_start=warm_start)
        else:
            decomp = bidifac_plus(grid, modules, lambdas, opts, order=order)
        return decomp, grid.full()

    lam = (default_lambdas(modules, grid.row_set_sizes, grid.col_set_sizes)
           if lambdas is None
           else np.broadcast_to(np.asarray(lambdas, dtype=float),
                                (modules.n_modules,)).copy())
    soft_rules = [lambda sub, l=l: soft_threshold_matrix(sub, l) for l in lam]
    main_rules = ([_evb_rule] * modules.n_modules if rule == "evb"
                  else soft_rules)
    if rule not in ("evb", "soft"):
        raise ValueError(f"unknown rule {rule!r}")

    mask = pattern.mask
    x_obs = grid.full()
    x_fill = x_obs.copy()
    x_fill[mask] = 0.0

    # blocks whose noise scale is re-estimated between convergence passes
    # (those with scattered missingness; purely blockwise scales are fixed)
    iterative_blocks = [
        (i, j)
        for i in range(grid.n_row_sets)
        for j in range(grid.n_col_sets)
        if pattern.entrywise_counts[i, j] > 0
    ]
    if opts.sigma_mode == SIGMA_USER:
        sigma = resolve_sigma(grid, opts)
        iterative_blocks = []
    else:
        # cold start: missing entries hold zeros, not fits, so the first
        # scaling skips the completion inflation
        sigma = sigma_for_missing(grid, pattern, x_fill,
                                  inflate_entrywise=False)

    ws = Workspace(modules, grid.row_set_sizes, grid.col_set_sizes)
    order = list(range(modules.n_modules)) if order is None else list(order)
    scale = grid.expand_per_block(sigma)
    imputed_prev = np.zeros(pattern.n_missing)
    total_prev = ws.total.copy()
    converged = False
    change = math.inf
    total_cycles = 0

    def run_stage(rules, stage_tol):
        nonlocal total_cycles, change, imputed_prev, total_prev
        for _ in range(opts.max_iterations):
            total_cycles += 1
            # missing entries of the scaled data carry the current structure
            x_scaled = x_fill / scale
            ws.sweep(x_scaled, rules, order)
            s_hat_missing = (ws.total * scale)[mask]
            change = max(rel_change(ws.total, total_prev),
                         rel_change(s_hat_missing, imputed_prev))
            total_prev = ws.total.copy()
            imputed_prev = s_hat_missing
            x_fill[mask] = s_hat_missing
            if change < stage_tol:
                return True
        return False

    sigma_history = [sigma.copy()]
    for sigma_round in range(MAX_SIGMA_ROUNDS):
        if sigma_round == 0 and rule == "evb" and warm_start:
            run_stage(soft_rules, max(opts.rel_tolerance, IMPUTE_WARM_TOL))
        converged = run_stage(main_rules, opts.rel_tolerance)
        if not iterative_blocks:
            break
        new_sigma = sigma.copy()
        for (i, j) in iterative_blocks:
            new_sigma[i, j] = _block_sigma(grid, pattern, i, j, x_fill,
                                           inflate=True)
        # stop when the scales stabilize or revisit an earlier round (a
        # component sitting on the detection boundary can make them 2-cycle)
        if any(np.max(np.abs(new_sigma - old) / old) < SIGMA_ROUND_TOL
               for old in sigma_history):
            break
        sigma_history.append(new_sigma.copy())
        new_scale = grid.expand_per_block(new_sigma)
        ratio = scale / new_scale
        ws.rescale(ratio)
        total_prev *= ratio
        sigma, scale = new_sigma, new_scale
    else:
        converged = False

    meta = FitMeta(total_cycles, converged, change, opts.rng_seed)
    decomp = ws.to_decomposition(sigma, meta)
    imputed = x_obs.copy()
    # fixed point: imputed entries are exactly the fitted structure there
    imputed[mask] = decomp.total_structure()[mask]
    return decomp, imputed


def ev_bidifac_impute(grid: BlockGrid, modules: ModuleGrid,
                      opts: FitOptions | None = None, order=None,
                      warm_start: bool = True):
    """Missing-data fit of the empirical variational Bayes linked decomposition.

    With an empty mask this reduces exactly to the fully observed fit. Returns
    ``(Decomposition, imputed matrix)``.
    """
    return linked_impute(grid, modules, opts, rule="evb", order=order,
                         warm_start=warm_start)


def _em_impute(x, mask, threshold_fn, rel_tolerance, max_iterations, init):
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError("mask shape must match the matrix")
    if mask.all():
        raise ValueError("matrix is entirely missing")
    fill = x.copy()
    fill[mask] = init[mask] if init is not None else 0.0
    if not mask.any():
        return fill
    s_prev = None
    for _ in range(max_iterations):
        s_hat = threshold_fn(fill).reconstruct()
        fill[mask] = s_hat[mask]
        if s_prev is not None and rel_change(s_hat, s_prev) < rel_tolerance:
            return fill
        s_prev = s_hat
    warnings.warn("EM imputation did not converge within max_iterations",
                  stacklevel=3)
    return fill


def em_impute_soft(x, mask, lam, rel_tolerance=1e-8, max_iterations=500,
                   init=None) -> np.ndarray:
    """Soft-threshold EM imputation: alternately fill missing entries with the
    current fit and re-threshold, until the fit stabilizes. ``init`` warm
    starts the missing entries (full-size matrix)."""
    return _em_impute(x, mask, lambda m: soft_threshold_matrix(m, lam),
                      rel_tolerance, max_iterations, init)


def em_impute_hard(x, mask, rank_r, rel_tolerance=1e-8, max_iterations=500,
                   init=None) -> np.ndarray:
    """Rank-constrained EM imputation at fixed rank ``rank_r``."""
    return _em_impute(x, mask, lambda m: hard_threshold_matrix(m, rank_r),
                      rel_tolerance, max_iterations, init)
