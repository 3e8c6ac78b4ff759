"""Decomposing a 2 x 2 grid of linked matrices into shared, partially shared
and specific low-rank modules.

Five of the nine possible modules carry planted rank-2 structure; the fit
should recover exactly which five, estimate their ranks, and beat the
fixed-penalty baseline on decomposition error.
"""

import numpy as np

from evblink import (
    FitOptions,
    bidifac_plus,
    check_uniqueness,
    ev_bidifac,
    gen_bidim,
    rdse,
    rse,
)

grid, modules, truth, active = gen_bidim(seed=7)
print(f"grid {grid.shape[0]} x {grid.shape[1]} in "
      f"{grid.n_row_sets} x {grid.n_col_sets} blocks; "
      f"{modules.n_modules} candidate modules, planted: {active}")

dec = ev_bidifac(grid, modules)
print(f"\nfit converged={dec.fit_meta.converged} after "
      f"{dec.fit_meta.iterations} sweeps; per-block noise scales:")
print(np.round(dec.sigma, 3))

print("\nmodule  row sets  col sets  rank  variance explained")
varexp = dec.variance_explained()
for k in range(modules.n_modules):
    r_sel, c_sel = modules.footprint(k)
    mark = "*" if k in active else " "
    print(f"  {k}{mark}     {np.flatnonzero(r_sel).tolist()}    "
          f"{np.flatnonzero(c_sel).tolist()}       {dec.module_rank(k)}"
          f"     {100 * varexp[k]:5.1f}%")
print("(* = module with planted structure)")

report = check_uniqueness(dec)
print(f"\nfactor independence conditions hold: {report.overall_ok}")

baseline = bidifac_plus(grid, modules,
                        opts=FitOptions(sigma_mode="user", sigma=1.0))
s_total = sum(truth)
fitted = [dec.module_full(k) for k in range(9)]
fitted_b = [baseline.module_full(k) for k in range(9)]
print("\n                       shrinkage fit   fixed-penalty baseline")
print(f"total structure RSE      {rse(s_total, sum(fitted)):.4f}"
      f"           {rse(s_total, sum(fitted_b)):.4f}")
print(f"decomposition RDSE       {rdse(truth, fitted):.4f}"
      f"           {rdse(truth, fitted_b):.4f}")
