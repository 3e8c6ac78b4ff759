"""Missing-data imputation: scattered entries on a single matrix, then whole
missing rows and columns on a linked grid (where only structure shared with
other blocks can fill the holes).
"""

import numpy as np

from evblink import (
    BlockGrid,
    classify_pattern,
    enumerate_modules,
    ev_bidifac_impute,
    gen_bidim,
    gen_hetero,
    rse_miss,
    rse_miss_blockwise,
)

# --- scattered missingness on one matrix -----------------------------------
m, n = 1000, 100
x, signal = gen_hetero(m, n, seed=1)
rng = np.random.default_rng(2)
mask = np.zeros(m * n, dtype=bool)
mask[rng.choice(m * n, size=m * n // 2, replace=False)] = True
mask = mask.reshape(m, n)

grid = BlockGrid.from_full(x, [m], [n], mask=mask)
dec, imputed = ev_bidifac_impute(grid, enumerate_modules(1, 1))
print(f"single matrix, 50% of entries missing:")
print(f"  converged={dec.fit_meta.converged} in {dec.fit_meta.iterations} "
      f"cycles, final noise scale {dec.sigma[0, 0]:.3f}")
print(f"  signal error at the missing entries: "
      f"{rse_miss(signal, imputed, mask):.4f}")
print(f"  observed entries untouched: "
      f"{bool(np.array_equal(imputed[~mask], x[~mask]))}")

# --- whole rows/columns missing from linked blocks -------------------------
grid_b, modules, truth, active = gen_bidim(seed=3)
x_full = grid_b.full()
row_mask = np.zeros(grid_b.shape, dtype=bool)
col_mask = np.zeros(grid_b.shape, dtype=bool)
g = np.random.default_rng(4)
ro, co = grid_b.row_offsets, grid_b.col_offsets
for i in range(2):
    for j in range(2):
        rows = g.choice(500, size=50, replace=False)
        cols = g.choice(50, size=5, replace=False)
        row_mask[ro[i] + rows, co[j]:co[j + 1]] = True
        col_mask[ro[i]:ro[i + 1], co[j] + cols] = True

masked = BlockGrid.from_full(x_full, [500, 500], [50, 50],
                             mask=row_mask | col_mask)
pattern = classify_pattern(masked)
print(f"\nlinked grid with {pattern.kind} missingness "
      f"({pattern.n_missing} entries):")
dec_b, imputed_b = ev_bidifac_impute(masked, modules)
err = rse_miss_blockwise(truth, imputed_b, row_mask, col_mask, modules)
print(f"  error against the estimable (cross-set) structure: {err:.4f}")
print("  a missing row of one block is recovered through modules the row "
      "set shares with other column sets")
