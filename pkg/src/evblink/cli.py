"""Command line interface: decompose, impute, estimate-sigma, simulate and
cv-impute over delimited text matrices described by a JSON manifest.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure. Errors print one line ``<category>: <detail>`` to stderr. Output
directories are populated in a temporary sibling and renamed into place, so
partially written runs never masquerade as complete; runs are reproducible
from their inputs and seed alone.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from evblink.decompose import (
    FitOptions,
    bidifac_plus,
    check_uniqueness,
    ev_bidifac,
)
from evblink.impute import classify_pattern, ev_bidifac_impute
from evblink.linked import BlockGrid, Decomposition, ModuleGrid, enumerate_modules
from evblink.shrinkage import estimate_sigma
from evblink.simbench import ExperimentSpec, ResultTable, cv_impute, run_experiment

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

MISSING_TOKENS = {"na", "nan"}


class ManifestError(ValueError):
    """Input file or manifest failed validation."""


# ---------------------------------------------------------------------------
# matrix files
# ---------------------------------------------------------------------------


def load_matrix(path: str):
    """Read a delimited numeric matrix; returns (values, missing mask).

    Tab or comma delimited (auto-detected from the first row); the tokens
    NA/NaN (case-insensitive) mark missing entries. Ragged rows, non-numeric
    tokens and non-finite values are errors naming the offending line.
    """
    rows, mask_rows = [], []
    delim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if delim is None:
                delim = "\t" if "\t" in line else ","
            vals, ms = [], []
            for colno, tok in enumerate(line.split(delim), start=1):
                tok = tok.strip()
                if tok.casefold() in MISSING_TOKENS:
                    vals.append(0.0)
                    ms.append(True)
                    continue
                try:
                    value = float(tok)
                except ValueError:
                    raise ManifestError(
                        f"{path}:{lineno}: column {colno}: "
                        f"invalid numeric token {tok!r}") from None
                if not math.isfinite(value):
                    raise ManifestError(
                        f"{path}:{lineno}: column {colno}: "
                        f"non-finite value {tok!r}")
                vals.append(value)
                ms.append(False)
            if rows and len(vals) != len(rows[0]):
                raise ManifestError(
                    f"{path}:{lineno}: ragged row with {len(vals)} values, "
                    f"expected {len(rows[0])}")
            rows.append(vals)
            mask_rows.append(ms)
    if not rows:
        raise ManifestError(f"{path}: empty matrix file")
    values = np.array(rows, dtype=float)
    mask = np.array(mask_rows, dtype=bool)
    if mask.all():
        raise ManifestError(f"{path}: every entry is missing")
    return values, mask


def write_matrix(path: str, values: np.ndarray,
                 mask: np.ndarray | None = None) -> None:
    """Write a matrix as tab-delimited text at full double precision
    (17 significant digits); masked entries are written as NA."""
    values = np.asarray(values, dtype=float)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(values.shape[0]):
            cells = []
            for j in range(values.shape[1]):
                if mask is not None and mask[i, j]:
                    cells.append("NA")
                else:
                    cells.append(f"{values[i, j]:.17g}")
            fh.write("\t".join(cells) + "\n")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

_OPTION_KEYS = {"tolerance", "max_iterations", "sigma_mode", "sigma", "seed",
                "center"}


@dataclass(frozen=True)
class Manifest:
    """A validated grid description: set sizes, block and mask file paths,
    the loaded grid, the module layout, and fit options."""

    path: str
    row_set_sizes: list
    col_set_sizes: list
    block_paths: list
    mask_paths: list
    grid: BlockGrid
    module_grid: ModuleGrid
    options: dict


def _require(data: dict, key: str, path: str):
    if key not in data:
        raise ManifestError(f"{path}: missing required key {key!r}")
    return data[key]


def _int_list(value, what: str, path: str) -> list:
    if (not isinstance(value, list) or not value
            or not all(isinstance(v, int) and v > 0 for v in value)):
        raise ManifestError(f"{path}: {what} must be a non-empty list of "
                            "positive integers")
    return list(value)


def parse_manifest(path: str) -> Manifest:
    """Load and fully validate a JSON manifest, including every referenced
    matrix file (declared dimensions must match file contents exactly)."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(
            f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    unknown = set(data) - {"row_set_sizes", "col_set_sizes", "blocks", "masks",
                           "modules", "options"}
    if unknown:
        raise ManifestError(f"{path}: unknown keys {sorted(unknown)}")

    row_sizes = _int_list(_require(data, "row_set_sizes", path),
                          "row_set_sizes", path)
    col_sizes = _int_list(_require(data, "col_set_sizes", path),
                          "col_set_sizes", path)
    n_i, n_j = len(row_sizes), len(col_sizes)

    block_paths = _require(data, "blocks", path)
    if (not isinstance(block_paths, list) or len(block_paths) != n_i
            or any(not isinstance(r, list) or len(r) != n_j
                   for r in block_paths)):
        raise ManifestError(
            f"{path}: blocks must be a {n_i} x {n_j} grid of file paths")
    mask_paths = data.get("masks")
    if mask_paths is None:
        mask_paths = [[None] * n_j for _ in range(n_i)]
    elif (not isinstance(mask_paths, list) or len(mask_paths) != n_i
          or any(not isinstance(r, list) or len(r) != n_j
                 for r in mask_paths)):
        raise ManifestError(
            f"{path}: masks must be a {n_i} x {n_j} grid of file paths "
            "or nulls")

    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    blocks, masks = [], []
    any_missing = False
    for i in range(n_i):
        brow, mrow = [], []
        for j in range(n_j):
            bpath = block_paths[i][j]
            if not isinstance(bpath, str):
                raise ManifestError(f"{path}: blocks[{i}][{j}] must be a path")
            try:
                values, na_mask = load_matrix(resolve(bpath))
            except FileNotFoundError:
                raise ManifestError(
                    f"{path}: block ({i},{j}): file not found: {bpath}"
                ) from None
            want = (row_sizes[i], col_sizes[j])
            if values.shape != want:
                raise ManifestError(
                    f"{path}: block ({i},{j}) ({bpath}): expected "
                    f"{want[0]} x {want[1]}, found "
                    f"{values.shape[0]} x {values.shape[1]}")
            mpath = mask_paths[i][j]
            if mpath is not None:
                mvals, mna = load_matrix(resolve(mpath))
                if mvals.shape != want:
                    raise ManifestError(
                        f"{path}: mask ({i},{j}) ({mpath}): expected "
                        f"{want[0]} x {want[1]}, found "
                        f"{mvals.shape[0]} x {mvals.shape[1]}")
                if mna.any():
                    raise ManifestError(
                        f"{path}: mask ({i},{j}) ({mpath}): missing tokens "
                        "are not allowed in mask files")
                na_mask = na_mask | (mvals != 0)
            if na_mask.all():
                raise ManifestError(
                    f"{path}: block ({i},{j}): every entry is missing")
            brow.append(values)
            mrow.append(na_mask)
            any_missing = any_missing or na_mask.any()
        blocks.append(brow)
        masks.append(mrow)

    full_mask = None
    if any_missing:
        full_mask = np.block(masks)
    grid = BlockGrid(blocks, row_sizes, col_sizes, mask=full_mask)

    modules_spec = data.get("modules", "enumerate")
    if modules_spec == "enumerate":
        module_grid = enumerate_modules(n_i, n_j)
    elif isinstance(modules_spec, dict):
        unknown = set(modules_spec) - {"row_sets", "col_sets"}
        if unknown:
            raise ManifestError(
                f"{path}: modules: unknown keys {sorted(unknown)}")
        rows = modules_spec.get("row_sets")
        cols = modules_spec.get("col_sets")
        if (not isinstance(rows, list) or not isinstance(cols, list)
                or len(rows) != len(cols) or not rows):
            raise ManifestError(
                f"{path}: modules must give equally long row_sets and "
                "col_sets lists (one entry per module)")
        for k, (r, c) in enumerate(zip(rows, cols)):
            if (not isinstance(r, list) or len(r) != n_i
                    or any(v not in (0, 1) for v in r)):
                raise ManifestError(
                    f"{path}: modules.row_sets[{k}] must be a 0/1 list of "
                    f"length {n_i}")
            if (not isinstance(c, list) or len(c) != n_j
                    or any(v not in (0, 1) for v in c)):
                raise ManifestError(
                    f"{path}: modules.col_sets[{k}] must be a 0/1 list of "
                    f"length {n_j}")
        try:
            module_grid = ModuleGrid(np.array(rows, dtype=bool).T,
                                     np.array(cols, dtype=bool).T)
        except ValueError as exc:
            raise ManifestError(f"{path}: modules: {exc}") from None
    else:
        raise ManifestError(
            f"{path}: modules must be \"enumerate\" or an object with "
            "row_sets/col_sets")

    options = data.get("options", {})
    if not isinstance(options, dict):
        raise ManifestError(f"{path}: options must be an object")
    unknown = set(options) - _OPTION_KEYS
    if unknown:
        raise ManifestError(f"{path}: options: unknown keys {sorted(unknown)}")
    return Manifest(path, row_sizes, col_sizes, block_paths, mask_paths,
                    grid, module_grid, options)


def _fit_options(manifest: Manifest, args) -> FitOptions:
    opts = manifest.options
    tol = args.tol if args.tol is not None else opts.get("tolerance", 1e-8)
    max_iter = (args.max_iter if args.max_iter is not None
                else opts.get("max_iterations", 500))
    seed = args.seed if args.seed is not None else opts.get("seed")
    sigma_mode = opts.get("sigma_mode", "estimate")
    sigma = opts.get("sigma")
    try:
        return FitOptions(max_iterations=max_iter, rel_tolerance=tol,
                          sigma_mode=sigma_mode, sigma=sigma, rng_seed=seed)
    except ValueError as exc:
        raise ManifestError(f"{manifest.path}: options: {exc}") from None


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


@contextmanager
def atomic_dir(out: str):
    out = os.path.abspath(out)
    if os.path.exists(out):
        raise ManifestError(f"output directory already exists: {out}")
    parent = os.path.dirname(out) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=os.path.basename(out) + ".partial-",
                           dir=parent)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.replace(tmp, out)


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_ready(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _decomposition_summary(dec: Decomposition, method: str) -> dict:
    mg = dec.module_grid
    varexp = dec.variance_explained()
    modules = []
    for k in range(dec.n_modules):
        r_sel, c_sel = mg.footprint(k)
        modules.append({
            "index": k,
            "row_sets": np.flatnonzero(r_sel).tolist(),
            "col_sets": np.flatnonzero(c_sel).tolist(),
            "rank": dec.module_rank(k),
            "variance_explained_pct": 100.0 * float(varexp[k]),
        })
    uniq = check_uniqueness(dec)
    return {
        "method": method,
        "modules": modules,
        "sigma": dec.sigma,
        "fit": {
            "iterations": dec.fit_meta.iterations,
            "converged": dec.fit_meta.converged,
            "final_rel_change": dec.fit_meta.final_rel_change,
        },
        "uniqueness": {
            "condition2_ok": uniq.condition2_ok,
            "condition3_ok": uniq.condition3_ok,
            "min_singular_gap_rows": uniq.min_singular_gap_rows,
            "min_singular_gap_cols": uniq.min_singular_gap_cols,
            "overall_ok": uniq.overall_ok,
        },
    }


def _center_rows(grid: BlockGrid):
    """Subtract per-row means of observed entries; returns (grid, centers)."""
    x = grid.full()
    mask = grid.mask
    if mask is None:
        centers = x.mean(axis=1)
    else:
        observed = np.where(mask, np.nan, x)
        with np.errstate(invalid="ignore"):
            centers = np.nanmean(observed, axis=1)
        centers = np.nan_to_num(centers)  # fully masked rows keep value 0
    centered = x - centers[:, None]
    return (BlockGrid.from_full(centered, grid.row_set_sizes,
                                grid.col_set_sizes, mask=mask), centers)


def _table_outputs(tmp: str, table: ResultTable) -> None:
    with open(os.path.join(tmp, "results.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table.to_tsv())
    write_json(os.path.join(tmp, "summary.json"),
               {"metadata": table.public_metadata(),
                "summary": table.summary()})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_decompose(args) -> int:
    manifest = parse_manifest(args.manifest)
    opts = _fit_options(manifest, args)
    grid = manifest.grid
    if grid.mask is not None and grid.mask.any():
        raise ManifestError(
            "grid has missing entries; use the impute command")
    centers = None
    if args.center:
        grid, centers = _center_rows(grid)
    if args.method == "evb":
        dec = ev_bidifac(grid, manifest.module_grid, opts)
    else:
        lambdas = None
        if args.lambdas not in (None, "default"):
            try:
                lambdas = [float(tok) for tok in args.lambdas.split(",")]
            except ValueError:
                raise ManifestError(
                    f"--lambda must be 'default' or comma-separated numbers, "
                    f"got {args.lambdas!r}") from None
            if len(lambdas) != manifest.module_grid.n_modules:
                raise ManifestError(
                    f"--lambda needs {manifest.module_grid.n_modules} values, "
                    f"got {len(lambdas)}")
        dec = bidifac_plus(grid, manifest.module_grid, lambdas, opts)
    with atomic_dir(args.out) as tmp:
        for k in range(dec.n_modules):
            write_matrix(os.path.join(tmp, f"module_{k:02d}.tsv"),
                         dec.module_full(k))
        if centers is not None:
            write_matrix(os.path.join(tmp, "row_centers.tsv"),
                         centers[:, None])
        summary = _decomposition_summary(dec, args.method)
        summary["centered"] = bool(args.center)
        write_json(os.path.join(tmp, "summary.json"), summary)
    ranks = [dec.module_rank(k) for k in range(dec.n_modules)]
    print(f"decomposed into {dec.n_modules} modules (ranks {ranks}); "
          f"converged={dec.fit_meta.converged}; output in {args.out}")
    return EXIT_OK


def cmd_impute(args) -> int:
    manifest = parse_manifest(args.manifest)
    opts = _fit_options(manifest, args)
    grid = manifest.grid
    centers = None
    if args.center:
        grid, centers = _center_rows(grid)
    pattern = classify_pattern(grid)
    dec, imputed = ev_bidifac_impute(grid, manifest.module_grid, opts)
    if centers is not None:
        imputed = imputed + centers[:, None]
    mask = (grid.mask if grid.mask is not None
            else np.zeros(grid.shape, dtype=bool))
    with atomic_dir(args.out) as tmp:
        write_matrix(os.path.join(tmp, "imputed.tsv"), imputed)
        with open(os.path.join(tmp, "imputed_index.tsv"), "w",
                  encoding="utf-8") as fh:
            fh.write("row\tcol\tvalue\n")
            for r, c in zip(*np.nonzero(mask)):
                fh.write(f"{r}\t{c}\t{imputed[r, c]:.17g}\n")
        summary = _decomposition_summary(dec, "evb")
        summary["centered"] = bool(args.center)
        summary["missing"] = {
            "kind": pattern.kind,
            "n_missing": pattern.n_missing,
            "per_block_counts": pattern.per_block_counts,
        }
        write_json(os.path.join(tmp, "summary.json"), summary)
    print(f"imputed {pattern.n_missing} entries ({pattern.kind}); "
          f"converged={dec.fit_meta.converged}; output in {args.out}")
    return EXIT_OK


def cmd_estimate_sigma(args) -> int:
    values, mask = load_matrix(args.matrix)
    if mask.any():
        raise ManifestError(
            f"{args.matrix}: matrix has missing entries; the noise-scale "
            "estimator needs a fully observed matrix")
    fit = estimate_sigma(values)
    print(f"sigma_hat={fit.sigma_hat:.10g}")
    print(f"alpha={fit.alpha:.10g}")
    print(f"objective={fit.objective_value:.10g}")
    print(f"grid_evaluations={fit.grid_evaluations}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        with open(args.spec, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(
            f"{args.spec}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ManifestError(f"{args.spec}: spec must be a JSON object")
    if "missing_fracs" in data:
        data["missing_fracs"] = tuple(data["missing_fracs"])
    if args.seed is not None:
        data["rng_seed"] = args.seed
    if args.threads is not None:
        data["threads"] = args.threads
    try:
        spec = ExperimentSpec(**data)
    except TypeError as exc:
        raise ManifestError(f"{args.spec}: {exc}") from None
    t0 = time.perf_counter()
    table = run_experiment(spec)
    with atomic_dir(args.out) as tmp:
        _table_outputs(tmp, table)
    print(f"simulated scenario {spec.scenario}: {len(table.rows)} result rows; "
          f"output in {args.out}", file=sys.stderr)
    print(f"wall time {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_cv_impute(args) -> int:
    manifest = parse_manifest(args.manifest)
    opts = _fit_options(manifest, args)
    grid = manifest.grid
    if args.center:
        grid, _ = _center_rows(grid)
    seed = args.seed if args.seed is not None else manifest.options.get("seed", 0)
    table = cv_impute(grid, manifest.module_grid, folds=args.folds,
                      col_frac=args.col_frac, row_frac=args.row_frac,
                      entry_frac=args.entry_frac, seed=seed,
                      threads=args.threads or 1, opts=opts)
    with atomic_dir(args.out) as tmp:
        _table_outputs(tmp, table)
    print(f"cross-validated {args.folds} folds; output in {args.out}",
          file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"usage-error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (overrides manifest/spec)")
    common.add_argument("--tol", type=float, default=None,
                        help="relative convergence tolerance")
    common.add_argument("--max-iter", type=int, default=None,
                        help="iteration cap for the fitting loops")
    common.add_argument("--center", action="store_true",
                        help="subtract per-row means of observed entries "
                             "before fitting, add back on output")
    common.add_argument("--threads", type=int, default=None,
                        help="worker parallelism for replicates and folds")

    parser = _Parser(prog="evblink",
                     description="Empirical variational Bayes linked matrix "
                                 "decomposition and imputation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", parents=[common],
                       help="fit a linked decomposition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("evb", "bidifac"), default="evb")
    p.add_argument("--lambda", dest="lambdas", default="default",
                   help="penalties for --method bidifac: 'default' or "
                        "comma-separated values, one per module")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("impute", parents=[common],
                       help="impute missing entries of a linked grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("estimate-sigma", parents=[common],
                       help="print the data-driven noise scale of a matrix")
    p.add_argument("--matrix", required=True)
    p.set_defaults(func=cmd_estimate_sigma)

    p = sub.add_parser("simulate", parents=[common],
                       help="run a seeded benchmark scenario")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cv-impute", parents=[common],
                       help="cross-validated imputation benchmark")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=20)
    p.add_argument("--col-frac", type=float, default=0.05)
    p.add_argument("--row-frac", type=float, default=0.05)
    p.add_argument("--entry-frac", type=float, default=0.05)
    p.set_defaults(func=cmd_cv_impute)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except ManifestError as exc:
        print(f"data-error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except np.linalg.LinAlgError as exc:
        print(f"numerical-error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"numerical-error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"data-error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data-error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
