import numpy as np
import pytest

from evblink.linked import (
    BlockGrid,
    ModuleGrid,
    embed_submatrix,
    enumerate_modules,
    extract_submatrix,
)


@pytest.fixture
def grid_2x2():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((30, 25))
    return BlockGrid.from_full(x, [20, 10], [15, 10]), x


class TestBlockGrid:
    def test_from_full_roundtrip(self, grid_2x2):
        grid, x = grid_2x2
        np.testing.assert_array_equal(grid.full(), x)
        assert grid.block(1, 0).shape == (10, 15)
        assert sum(grid.row_set_sizes) == grid.shape[0]
        assert sum(grid.col_set_sizes) == grid.shape[1]

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            BlockGrid([[np.zeros((3, 4))], [np.zeros((2, 5))]], [3, 2], [4])
        with pytest.raises(ValueError):
            BlockGrid.from_full(np.zeros((5, 4)), [3, 3], [4])

    def test_mask_validation(self, grid_2x2):
        grid, x = grid_2x2
        with pytest.raises(ValueError):
            BlockGrid.from_full(x, [20, 10], [15, 10],
                                mask=np.zeros((3, 3), dtype=bool))
        mask = np.zeros((30, 25), dtype=bool)
        mask[0, 0] = True
        g = BlockGrid.from_full(x, [20, 10], [15, 10], mask=mask)
        assert g.block_mask(0, 0)[0, 0]
        assert not g.block_mask(1, 1).any()

    def test_expand_per_block(self, grid_2x2):
        grid, _ = grid_2x2
        vals = np.array([[1.0, 2.0], [3.0, 4.0]])
        full = grid.expand_per_block(vals)
        assert full.shape == grid.shape
        assert np.all(full[:20, :15] == 1.0)
        assert np.all(full[20:, 15:] == 4.0)


class TestEnumerateModules:
    def test_counts(self):
        assert enumerate_modules(2, 2).n_modules == 9
        assert enumerate_modules(1, 1).n_modules == 1
        assert enumerate_modules(3, 1).n_modules == 7

    def test_cap(self):
        with pytest.raises(ValueError, match="explicit"):
            enumerate_modules(7, 7)

    def test_globally_shared_first(self):
        mg = enumerate_modules(3, 2)
        r, c = mg.footprint(0)
        assert r.all() and c.all()

    def test_deterministic_order(self):
        a = enumerate_modules(2, 2)
        b = enumerate_modules(2, 2)
        np.testing.assert_array_equal(a.row_indicator, b.row_indicator)
        np.testing.assert_array_equal(a.col_indicator, b.col_indicator)
        # frozen canonical order for the 2 x 2 layout: descending bitmask
        # counting, row subsets in the outer loop
        expected_rows = [(1, 1), (1, 1), (1, 1), (0, 1), (0, 1), (0, 1),
                         (1, 0), (1, 0), (1, 0)]
        expected_cols = [(1, 1), (0, 1), (1, 0), (1, 1), (0, 1), (1, 0),
                         (1, 1), (0, 1), (1, 0)]
        got_rows = [tuple(int(v) for v in a.row_indicator[:, k])
                    for k in range(9)]
        got_cols = [tuple(int(v) for v in a.col_indicator[:, k])
                    for k in range(9)]
        assert got_rows == expected_rows
        assert got_cols == expected_cols


class TestModuleGrid:
    def test_empty_module_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            ModuleGrid(np.array([[1, 0]]).T.reshape(1, 2),
                       np.array([[1, 0]]).reshape(1, 2))

    def test_duplicate_rejected(self):
        r = np.array([[1, 1], [1, 1]], dtype=bool)
        c = np.array([[1, 1]], dtype=bool)
        with pytest.raises(ValueError, match="duplicate"):
            ModuleGrid(r, c)


class TestExtractEmbed:
    def test_full_module(self, grid_2x2):
        grid, x = grid_2x2
        np.testing.assert_array_equal(
            extract_submatrix(grid, [True, True], [True, True]), x)

    def test_single_block(self, grid_2x2):
        grid, _ = grid_2x2
        np.testing.assert_array_equal(
            extract_submatrix(grid, [False, True], [True, False]),
            grid.block(1, 0))

    def test_vertical_concatenation(self, grid_2x2):
        grid, _ = grid_2x2
        got = extract_submatrix(grid, [True, True], [True, False])
        np.testing.assert_array_equal(
            got, np.vstack([grid.block(0, 0), grid.block(1, 0)]))

    def test_embed_then_extract_identity(self, grid_2x2):
        grid, _ = grid_2x2
        rng = np.random.default_rng(5)
        sub = rng.standard_normal((10, 15))
        full = embed_submatrix(sub, [False, True], [True, False],
                               grid.row_set_sizes, grid.col_set_sizes)
        assert full.shape == grid.shape
        np.testing.assert_array_equal(
            full[20:, :15], sub)
        # zero outside the footprint
        assert np.all(full[:20] == 0) and np.all(full[:, 15:] == 0)

    def test_zero_roundtrip(self, grid_2x2):
        grid, _ = grid_2x2
        full = embed_submatrix(np.zeros((20, 10)), [True, False],
                               [False, True],
                               grid.row_set_sizes, grid.col_set_sizes)
        assert not full.any()

    def test_dimension_mismatch(self, grid_2x2):
        grid, _ = grid_2x2
        with pytest.raises(ValueError, match="footprint"):
            embed_submatrix(np.zeros((5, 5)), [True, False], [True, False],
                            grid.row_set_sizes, grid.col_set_sizes)
