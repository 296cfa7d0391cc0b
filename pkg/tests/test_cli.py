import json

import numpy as np
import pytest
from PIL import Image

from builtcount.cli import main
from builtcount.grid import read_cell_table


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "12", "--max-count", "20", "--seed", "1",
                 "--size", "128"]) == 0
    assert main(["train-ssnet", "--manifest", str(root / "data" / "manifest.tsv"), "--out", str(root / "ss.npz"),
                 "--epochs", "2", "--mining-interval", "1", "--width-mult", "0.0625", "--patches-per-tile", "4",
                 "--lr", "0.001"]) == 0
    return root


def test_synth_and_validate(workspace, capsys):
    assert (workspace / "data" / "run_config.json").exists()
    cfg = json.loads((workspace / "data" / "run_config.json").read_text())
    assert cfg["seed"] == 1 and cfg["n"] == 12
    assert main(["validate-manifest", str(workspace / "data" / "manifest.tsv")]) == 0
    assert "12 entries" in capsys.readouterr().out


def test_validate_reports_bad_manifest(tmp_path, capsys):
    (tmp_path / "m.tsv").write_text("a\tmissing.png\t3\ttrain\n")
    assert main(["validate-manifest", str(tmp_path / "m.tsv")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and len(err.strip().splitlines()) == 1


def test_ssnet_checkpoint_and_segment(workspace, tmp_path):
    assert (workspace / "ss.npz.config.json").exists()
    img = np.random.default_rng(0).integers(0, 256, (100, 120, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "img.png")
    assert main(["segment", "--model", str(workspace / "ss.npz"), "--image", str(tmp_path / "img.png"),
                 "--out", str(tmp_path / "p.png"), "--npy"]) == 0
    assert np.array(Image.open(tmp_path / "p.png")).shape == (100, 120)
    assert np.load(tmp_path / "p.npy").shape == (100, 120)


def test_attention_kind_needs_ssnet(workspace, tmp_path, capsys):
    code = main(["train-counter", "--kind", "gwap", "--manifest", str(workspace / "data" / "manifest.tsv"),
                 "--out", str(tmp_path / "g.npz")])
    assert code == 1
    assert "--ssnet" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    assert main(["eval", "--bogus"]) == 2
    assert main([]) == 2
    assert main(["--help"]) == 0


def test_train_eval_count_render(workspace, tmp_path):
    manifest = str(workspace / "data" / "manifest.tsv")
    model = tmp_path / "fusion.npz"
    assert main(["train-counter", "--kind", "fusion", "--manifest", manifest, "--ssnet", str(workspace / "ss.npz"),
                 "--out", str(model), "--epochs", "2"]) == 0
    assert main(["eval", "--model", str(model), "--manifest", manifest, "--out", str(tmp_path / "ev")]) == 0
    for name in ("eval_bands.tsv", "eval_residuals.tsv", "eval_summary.txt", "eval_rounded_summary.txt",
                 "run_config.json"):
        assert (tmp_path / "ev" / name).exists()
    assert len((tmp_path / "ev" / "eval_residuals.tsv").read_text().splitlines()) == 13

    big = np.random.default_rng(1).integers(0, 256, (1008, 3024, 3), dtype=np.uint8)
    Image.fromarray(big).save(tmp_path / "big.png")
    args = ["count-tile", "--model", str(model), "--image", str(tmp_path / "big.png"), "--cell", "336"]
    assert main(args + ["--out", str(tmp_path / "c1.tsv")]) == 0
    assert main(args + ["--out", str(tmp_path / "c2.tsv"), "--workers", "2"]) == 0
    grid = read_cell_table(tmp_path / "c1.tsv")
    assert len(grid.cells) == 27
    assert (tmp_path / "c1.tsv").read_bytes() == (tmp_path / "c2.tsv").read_bytes()

    truth = tmp_path / "truth.tsv"
    truth.write_text("row\tcol\ttruth\n" + "".join(f"{c.row}\t{c.col}\t{c.pred}\n" for c in grid.cells))
    assert main(["render", "--cells", str(tmp_path / "c1.tsv"), "--out", str(tmp_path / "h.png"),
                 "--image", str(tmp_path / "big.png"), "--truth", str(truth)]) == 0
    assert (tmp_path / "h.png").exists() and (tmp_path / "h_series.tsv").exists()
    assert read_cell_table(tmp_path / "h_cells.tsv").cells[5].truth == grid.cells[5].pred


def test_drc_train_and_warm_start_rules(workspace, tmp_path, capsys):
    manifest = str(workspace / "data" / "manifest.tsv")
    drc = tmp_path / "drc.npz"
    assert main(["train-counter", "--kind", "drc", "--manifest", manifest, "--out", str(drc), "--epochs", "1"]) == 0
    assert main(["train-counter", "--kind", "gwap", "--manifest", manifest, "--ssnet", str(workspace / "ss.npz"),
                 "--out", str(tmp_path / "g.npz"), "--epochs", "1", "--warm-start", str(drc)]) == 1
    assert main(["train-counter", "--kind", "fusion", "--manifest", manifest, "--ssnet", str(workspace / "ss.npz"),
                 "--out", str(tmp_path / "f.npz"), "--epochs", "1", "--warm-start", str(drc)]) == 0


def test_count_tile_too_small(workspace, tmp_path, capsys):
    Image.fromarray(np.zeros((200, 200, 3), np.uint8)).save(tmp_path / "s.png")
    drc = tmp_path / "drc.npz"
    main(["train-counter", "--kind", "drc", "--manifest", str(workspace / "data" / "manifest.tsv"),
          "--out", str(drc), "--epochs", "1"])
    assert main(["count-tile", "--model", str(drc), "--image", str(tmp_path / "s.png"),
                 "--out", str(tmp_path / "c.tsv")]) == 1
    assert "single-image inference" in capsys.readouterr().err
