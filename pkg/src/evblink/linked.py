"""Data model for bidimensionally linked block matrices.

A grid of I x J dense blocks shares row sets across block rows and column
sets across block columns, and concatenates to a single M x N matrix. Modules
are low-rank structures confined to a subset of row sets and column sets
(zero elsewhere), named by binary indicator matrices R (I x K) and C (J x K).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BlockGrid",
    "ModuleGrid",
    "ModuleFactors",
    "FitMeta",
    "Decomposition",
    "enumerate_modules",
    "extract_submatrix",
    "embed_submatrix",
]


def _offsets(sizes) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)])


@dataclass(frozen=True)
class BlockGrid:
    """An I x J grid of linked data blocks, block (i, j) shaped M_i x N_j.

    ``mask`` is an optional boolean M x N array over the concatenated matrix,
    True marking missing entries; the stored values at masked positions carry
    no information.
    """

    blocks: list
    row_set_sizes: list
    col_set_sizes: list
    mask: np.ndarray | None = None

    def __post_init__(self):
        if len(self.blocks) != len(self.row_set_sizes):
            raise ValueError("blocks must have one row of blocks per row set")
        for i, row in enumerate(self.blocks):
            if len(row) != len(self.col_set_sizes):
                raise ValueError(f"block row {i} must have one block per column set")
            for j, b in enumerate(row):
                want = (self.row_set_sizes[i], self.col_set_sizes[j])
                if b.shape != want:
                    raise ValueError(
                        f"block ({i},{j}) has shape {b.shape}, expected {want}"
                    )
        if self.mask is not None and self.mask.shape != self.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match grid shape {self.shape}"
            )

    @classmethod
    def from_full(cls, x, row_set_sizes, col_set_sizes, mask=None) -> "BlockGrid":
        """Split a concatenated M x N matrix into its blocks."""
        x = np.asarray(x, dtype=float)
        if x.shape != (int(np.sum(row_set_sizes)), int(np.sum(col_set_sizes))):
            raise ValueError(
                f"matrix shape {x.shape} does not match set sizes "
                f"{tuple(row_set_sizes)} x {tuple(col_set_sizes)}"
            )
        ro, co = _offsets(row_set_sizes), _offsets(col_set_sizes)
        blocks = [
            [x[ro[i]:ro[i + 1], co[j]:co[j + 1]].copy()
             for j in range(len(col_set_sizes))]
            for i in range(len(row_set_sizes))
        ]
        return cls(blocks, list(row_set_sizes), list(col_set_sizes),
                   None if mask is None else np.asarray(mask, dtype=bool))

    @property
    def n_row_sets(self) -> int:
        return len(self.row_set_sizes)

    @property
    def n_col_sets(self) -> int:
        return len(self.col_set_sizes)

    @property
    def shape(self) -> tuple[int, int]:
        return (int(np.sum(self.row_set_sizes)), int(np.sum(self.col_set_sizes)))

    @property
    def row_offsets(self) -> np.ndarray:
        return _offsets(self.row_set_sizes)

    @property
    def col_offsets(self) -> np.ndarray:
        return _offsets(self.col_set_sizes)

    def block(self, i: int, j: int) -> np.ndarray:
        return self.blocks[i][j]

    def block_mask(self, i: int, j: int) -> np.ndarray | None:
        if self.mask is None:
            return None
        ro, co = self.row_offsets, self.col_offsets
        return self.mask[ro[i]:ro[i + 1], co[j]:co[j + 1]]

    def full(self) -> np.ndarray:
        """Concatenated M x N matrix (row sets stacked, column sets side by side)."""
        return np.block([[self.blocks[i][j] for j in range(self.n_col_sets)]
                         for i in range(self.n_row_sets)])

    def expand_per_block(self, values: np.ndarray) -> np.ndarray:
        """Blow an I x J per-block array up to the full M x N layout."""
        values = np.asarray(values, dtype=float)
        return np.repeat(np.repeat(values, self.row_set_sizes, axis=0),
                         self.col_set_sizes, axis=1)


@dataclass(frozen=True)
class ModuleGrid:
    """Binary indicators naming which row sets (R: I x K) and column sets
    (C: J x K) each of the K modules spans."""

    row_indicator: np.ndarray
    col_indicator: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.row_indicator, dtype=bool)
        c = np.asarray(self.col_indicator, dtype=bool)
        object.__setattr__(self, "row_indicator", r)
        object.__setattr__(self, "col_indicator", c)
        if r.ndim != 2 or c.ndim != 2 or r.shape[1] != c.shape[1]:
            raise ValueError("row and column indicators must agree on the module count")
        if not (r.any(axis=0).all() and c.any(axis=0).all()):
            raise ValueError("every module must span at least one row set and one column set")
        seen = set()
        for k in range(r.shape[1]):
            key = (r[:, k].tobytes(), c[:, k].tobytes())
            if key in seen:
                raise ValueError(f"duplicate module footprint at column {k}")
            seen.add(key)

    @property
    def n_modules(self) -> int:
        return self.row_indicator.shape[1]

    def footprint(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Boolean (row-set selector, column-set selector) of module k."""
        return self.row_indicator[:, k], self.col_indicator[:, k]


def enumerate_modules(i_sets: int, j_sets: int, cap: int = 4095) -> ModuleGrid:
    """All (2^I - 1)(2^J - 1) non-empty (row-subset, column-subset) modules.

    Deterministic binary-counting order, row subsets in the outer loop, with
    masks descending so the globally shared module comes first.
    """
    if i_sets < 1 or j_sets < 1:
        raise ValueError("need at least one row set and one column set")
    total = (2 ** i_sets - 1) * (2 ** j_sets - 1)
    if total > cap:
        raise ValueError(
            f"enumeration would create {total} modules (cap {cap}); "
            "supply explicit row/column indicators instead"
        )
    rows, cols = [], []
    for rmask in range(2 ** i_sets - 1, 0, -1):
        for cmask in range(2 ** j_sets - 1, 0, -1):
            rows.append([(rmask >> i) & 1 for i in range(i_sets)])
            cols.append([(cmask >> j) & 1 for j in range(j_sets)])
    return ModuleGrid(np.array(rows, dtype=bool).T, np.array(cols, dtype=bool).T)


def _selector_indices(selector, offsets) -> np.ndarray:
    parts = [np.arange(offsets[s], offsets[s + 1])
             for s in np.flatnonzero(selector)]
    return np.concatenate(parts)


def extract_submatrix(grid: BlockGrid, row_sel, col_sel) -> np.ndarray:
    """Concatenated submatrix over the selected row sets and column sets.

    Set order follows the grid layout; the result has shape
    (sum of selected M_i) x (sum of selected N_j).
    """
    rows = _selector_indices(np.asarray(row_sel, dtype=bool), grid.row_offsets)
    cols = _selector_indices(np.asarray(col_sel, dtype=bool), grid.col_offsets)
    return grid.full()[np.ix_(rows, cols)]


def embed_submatrix(sub: np.ndarray, row_sel, col_sel,
                    row_set_sizes, col_set_sizes) -> np.ndarray:
    """Place a module submatrix back into the full M x N layout, zero elsewhere.

    Inverse of ``extract_submatrix``: extracting the embedded matrix returns
    ``sub`` exactly.
    """
    ro, co = _offsets(row_set_sizes), _offsets(col_set_sizes)
    rows = _selector_indices(np.asarray(row_sel, dtype=bool), ro)
    cols = _selector_indices(np.asarray(col_sel, dtype=bool), co)
    sub = np.asarray(sub, dtype=float)
    if sub.shape != (rows.size, cols.size):
        raise ValueError(
            f"submatrix shape {sub.shape} does not match the module footprint "
            f"({rows.size}, {cols.size})"
        )
    out = np.zeros((int(ro[-1]), int(co[-1])))
    out[np.ix_(rows, cols)] = sub
    return out


@dataclass(frozen=True)
class ModuleFactors:
    """Factored module on its non-zero footprint: ``sub = u @ diag(d) @ v.T``
    with d strictly positive (rank 0 is stored as empty factors)."""

    u: np.ndarray
    d: np.ndarray
    v: np.ndarray

    @classmethod
    def zero(cls, sub_m: int, sub_n: int) -> "ModuleFactors":
        return cls(np.zeros((sub_m, 0)), np.zeros(0), np.zeros((sub_n, 0)))

    @property
    def rank(self) -> int:
        return self.d.shape[0]

    def dense(self) -> np.ndarray:
        return (self.u * self.d) @ self.v.T


@dataclass(frozen=True)
class FitMeta:
    iterations: int
    converged: bool
    final_rel_change: float
    rng_seed: int | None = None
    objective_trace: tuple = field(default_factory=tuple)


@dataclass(frozen=True)
class Decomposition:
    """A fitted K-module decomposition of a block grid.

    Module factors are stored in noise-scaled space (each block divided by its
    sigma); per-block accessors rescale back to data units. Structural zeros
    outside each module footprint are implicit.
    """

    modules: list
    module_grid: ModuleGrid
    sigma: np.ndarray
    row_set_sizes: list
    col_set_sizes: list
    fit_meta: FitMeta

    @property
    def shape(self) -> tuple[int, int]:
        return (int(np.sum(self.row_set_sizes)), int(np.sum(self.col_set_sizes)))

    @property
    def n_modules(self) -> int:
        return len(self.modules)

    def module_rank(self, k: int) -> int:
        return self.modules[k].rank

    def _sigma_full(self) -> np.ndarray:
        return np.repeat(np.repeat(self.sigma, self.row_set_sizes, axis=0),
                         self.col_set_sizes, axis=1)

    def module_scaled_full(self, k: int) -> np.ndarray:
        """Module k in noise-scaled units, embedded at full M x N size."""
        r_sel, c_sel = self.module_grid.footprint(k)
        return embed_submatrix(self.modules[k].dense(), r_sel, c_sel,
                               self.row_set_sizes, self.col_set_sizes)

    def module_full(self, k: int) -> np.ndarray:
        """Module k in data units, embedded at full M x N size."""
        return self.module_scaled_full(k) * self._sigma_full()

    def total_structure(self) -> np.ndarray:
        """Sum of all modules in data units (the fitted low-rank structure)."""
        out = np.zeros(self.shape)
        for k in range(self.n_modules):
            out += self.module_scaled_full(k)
        return out * self._sigma_full()

    def variance_explained(self) -> np.ndarray:
        """Share of squared fitted structure carried by each module."""
        norms = np.array([np.sum(self.module_full(k) ** 2)
                          for k in range(self.n_modules)])
        total = norms.sum()
        return norms / total if total > 0 else norms
