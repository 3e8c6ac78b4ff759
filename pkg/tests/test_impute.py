import warnings

import numpy as np
import pytest

from evblink.decompose import FitOptions
from evblink.impute import (
    classify_pattern,
    completion_inflation,
    em_impute_hard,
    em_impute_soft,
    ev_bidifac_impute,
    linked_impute,
    sigma_for_missing,
)
from evblink.linked import BlockGrid, enumerate_modules
from evblink.decompose import ev_bidifac


def _grid_with_mask(x, rows, cols, mask):
    return BlockGrid.from_full(x, rows, cols, mask=mask)


class TestClassifyPattern:
    def test_kinds(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((20, 12))
        entry = np.zeros((20, 12), dtype=bool)
        entry[3, 4] = entry[7, 7] = True
        p = classify_pattern(_grid_with_mask(x, [10, 10], [6, 6], entry))
        assert p.kind == "entrywise"
        assert p.n_missing == 2
        assert p.per_block_counts.sum() == 2
        assert not p.has_blockwise(0, 0)

        block = np.zeros((20, 12), dtype=bool)
        block[2, 0:6] = True          # full row of block (0, 0)
        block[10:20, 8] = True        # full column of block (1, 1)
        p = classify_pattern(_grid_with_mask(x, [10, 10], [6, 6], block))
        assert p.kind == "blockwise"
        np.testing.assert_array_equal(p.missing_rows[(0, 0)], [2])
        np.testing.assert_array_equal(p.missing_cols[(1, 1)], [2])
        assert p.entrywise_counts.sum() == 0

        p = classify_pattern(_grid_with_mask(x, [10, 10], [6, 6],
                                             entry | block))
        assert p.kind == "mixed"
        assert p.entrywise_counts[0, 0] == 1

    def test_fully_missing_block_rejected(self):
        x = np.zeros((8, 6))
        mask = np.zeros((8, 6), dtype=bool)
        mask[:4, :3] = True
        with pytest.raises(ValueError, match="entirely missing"):
            classify_pattern(_grid_with_mask(x, [4, 4], [3, 3], mask))

    def test_empty_mask(self):
        x = np.zeros((4, 4))
        p = classify_pattern(BlockGrid.from_full(x, [4], [4]))
        assert p.n_missing == 0


class TestSigmaForMissing:
    def test_no_missing_matches_plain_estimate(self):
        from evblink.shrinkage import estimate_sigma
        rng = np.random.default_rng(1)
        x = rng.standard_normal((200, 40))
        grid = BlockGrid.from_full(x, [200], [40])
        p = classify_pattern(grid)
        got = sigma_for_missing(grid, p)
        assert got[0, 0] == estimate_sigma(x).sigma_hat

    def test_entrywise_converged_scale(self):
        # unit-noise block with 20% scattered missingness: the converged
        # scale of the imputation run lands near 1 (inflation 1/0.8 on the
        # variance)
        mods = enumerate_modules(1, 1)
        vals = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((1000, 100))
            mask = np.zeros(x.size, dtype=bool)
            mask[rng.choice(x.size, size=int(0.2 * x.size), replace=False)] = True
            grid = _grid_with_mask(x, [1000], [100], mask.reshape(x.shape))
            dec, _ = ev_bidifac_impute(grid, mods)
            vals.append(dec.sigma[0, 0])
        assert all(0.9 <= v <= 1.4 for v in vals)

    def test_blockwise_complete_submatrix(self):
        vals = []
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            x = rng.standard_normal((1000, 100))
            mask = np.zeros((1000, 100), dtype=bool)
            cols = rng.choice(100, size=10, replace=False)
            mask[:, cols] = True
            grid = _grid_with_mask(x, [1000], [100], mask)
            p = classify_pattern(grid)
            vals.append(sigma_for_missing(grid, p)[0, 0])
        assert all(0.95 <= v <= 1.05 for v in vals)

    def test_inflation_factor(self):
        assert completion_inflation(100, 0) == 1.0
        assert completion_inflation(100, 36) == pytest.approx(1.25)

    def test_degenerate_needs_user_sigma(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 5))
        mask = np.zeros((6, 5), dtype=bool)
        mask[1:, :] = True  # only one observed row
        grid = _grid_with_mask(x, [6], [5], mask)
        p = classify_pattern(grid)
        with pytest.raises(ValueError, match="user"):
            sigma_for_missing(grid, p)


class TestLinkedImpute:
    def test_empty_mask_equals_plain_fit(self):
        rng = np.random.default_rng(3)
        grid, modules, *_ = (lambda g: (g, enumerate_modules(2, 2)))(
            BlockGrid.from_full(
                rng.standard_normal((80, 40))
                + 2 * np.outer(rng.standard_normal(80), rng.standard_normal(40)),
                [40, 40], [20, 20]))
        dec_a = ev_bidifac(grid, modules)
        dec_b, imputed = ev_bidifac_impute(grid, modules)
        np.testing.assert_array_equal(dec_a.total_structure(),
                                      dec_b.total_structure())
        np.testing.assert_array_equal(dec_a.sigma, dec_b.sigma)
        np.testing.assert_array_equal(imputed, grid.full())

    def test_observed_preserved_and_fixed_point(self):
        rng = np.random.default_rng(4)
        s = 3 * np.outer(rng.standard_normal(60), rng.standard_normal(30))
        x = s + rng.standard_normal((60, 30))
        mask = rng.random((60, 30)) < 0.25
        grid = _grid_with_mask(x, [30, 30], [15, 15], mask)
        dec, imputed = ev_bidifac_impute(grid, enumerate_modules(2, 2))
        np.testing.assert_array_equal(imputed[~mask], x[~mask])
        np.testing.assert_array_equal(imputed[mask],
                                      dec.total_structure()[mask])

    def test_imputed_sequence_is_cauchy_at_fixed_sigma(self):
        # with fixed noise scales the impute-and-sweep loop is a descent and
        # the imputed matrices form a Cauchy sequence: step sizes can jump
        # while a new component builds past the detection boundary, but once
        # the retained rank stabilizes they decrease geometrically to zero
        rng = np.random.default_rng(5)
        s = 4 * np.outer(rng.standard_normal(80), rng.standard_normal(40))
        x = s + rng.standard_normal((80, 40))
        mask = rng.random((80, 40)) < 0.3
        grid = _grid_with_mask(x, [80], [40], mask)
        mods = enumerate_modules(1, 1)
        prev_imp = None
        changes = []
        # prefixes of the same deterministic trajectory give the per-cycle
        # step sizes of the public function
        for budget in range(1, 22):
            opts = FitOptions(sigma_mode="user", sigma=1.0,
                              max_iterations=budget, rel_tolerance=1e-14)
            _, imp = linked_impute(grid, mods, opts, warm_start=False)
            if prev_imp is not None:
                changes.append(np.linalg.norm(imp - prev_imp))
            prev_imp = imp
        changes = np.array(changes)
        tail = changes[-6:]
        assert np.all(np.diff(tail) < 0)
        assert changes[-1] < 1e-2 * changes.max()

    def test_unknown_rule(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        grid = _grid_with_mask(np.eye(4), [4], [4], mask)
        with pytest.raises(ValueError, match="rule"):
            linked_impute(grid, enumerate_modules(1, 1), rule="median")

    def test_beats_em_baselines_at_half_missing(self, fig23_table):
        evb = fig23_table.values("rse_miss_50", "evb")
        soft = fig23_table.values("rse_miss_50", "soft_em")
        hard = fig23_table.values("rse_miss_50", "hard_em")
        wins = int(np.sum((evb < soft) & (evb < hard)))
        assert wins >= 16  # at least 80% of 20 replicates

    def test_blockwise_linked_beats_soft_baseline(self, bidim_impute_table):
        evb = bidim_impute_table.values("rse_miss_block", "evb_linked")
        soft = bidim_impute_table.values("rse_miss_block", "bidifac")
        assert np.all(np.isfinite(evb))
        assert np.mean(evb < soft) >= 0.7


class TestEmImpute:
    def test_empty_mask_identity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((10, 6))
        mask = np.zeros((10, 6), dtype=bool)
        np.testing.assert_array_equal(em_impute_soft(x, mask, 1.0), x)
        np.testing.assert_array_equal(em_impute_hard(x, mask, 2), x)

    def test_huge_penalty_imputes_zero(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((10, 6))
        mask = rng.random((10, 6)) < 0.3
        out = em_impute_soft(x, mask, 1e9)
        assert np.all(out[mask] == 0.0)
        out = em_impute_hard(x, mask, 0)
        assert np.all(out[mask] == 0.0)

    def test_exact_rank_one_completion(self):
        rng = np.random.default_rng(8)
        x = np.outer(rng.standard_normal(10), rng.standard_normal(6))
        mask = np.zeros((10, 6), dtype=bool)
        mask[[0, 3, 7], [1, 4, 2]] = True
        out = em_impute_hard(x, mask, 1, rel_tolerance=1e-12,
                             max_iterations=2000)
        assert np.max(np.abs(out - x)) < 1e-6

    def test_observed_never_modified(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((15, 8))
        mask = rng.random((15, 8)) < 0.4
        out = em_impute_soft(x, mask, 0.5)
        np.testing.assert_array_equal(out[~mask], x[~mask])

    def test_nonconvergence_warns(self):
        rng = np.random.default_rng(10)
        x = np.outer(rng.standard_normal(20), rng.standard_normal(10))
        x += 0.01 * rng.standard_normal((20, 10))
        mask = rng.random((20, 10)) < 0.5
        with pytest.warns(UserWarning, match="did not converge"):
            em_impute_soft(x, mask, 0.01, rel_tolerance=1e-14,
                           max_iterations=2)

    def test_fully_missing_rejected(self):
        with pytest.raises(ValueError):
            em_impute_soft(np.zeros((3, 3)), np.ones((3, 3), dtype=bool), 1.0)
