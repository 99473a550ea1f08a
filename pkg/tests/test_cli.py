import json
import os

import numpy as np
import pytest

from deblur_lab import blur_synth as bs
from deblur_lab.cli import build_parser, run
from deblur_lab.pipeline import save_png
from deblur_lab.model import ModelConfig
from deblur_lab.synthetic import text_scene

SUBCOMMANDS = [["kernel", "gen"], ["kernel", "inspect"], ["blur"], ["stats"], ["train"], ["eval"],
               ["deblur"], ["gradcheck"]]


@pytest.fixture
def corpus(tmp_path):
    out = tmp_path / "corpus"
    assert run(["blur", "--n", "8", "--scenes", "3", "--img-size", "32", "--sizes", "7:9:2", "--out", str(out)]) == 0
    return out


def test_kernel_gen_linear(tmp_path):
    out = tmp_path / "k"
    assert run(["kernel", "gen", "--type", "linear", "--size", "13", "--angle", "30", "--length", "9",
                "--out", str(out)]) == 0
    k = bs.load_kernel(out / "kernel_0000.psf")
    assert k.size == 13 and abs(k.values.sum() - 1) <= 1e-9
    assert (out / "kernel_0000_spectrum.png").exists()
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["angle"] == 30.0 and resolved["seed"] == 0


def test_kernel_inspect(tmp_path):
    bs.save_kernel(tmp_path / "a.psf", bs.generate_linear_kernel(11, 45, 7))
    assert run(["kernel", "inspect", str(tmp_path / "a.psf"), "--out", str(tmp_path / "o")]) == 0
    rows = json.loads((tmp_path / "o" / "inspect.json").read_text())
    assert rows[0]["size"] == 11 and rows[0]["anisotropy"] > 1


def test_blur_steps_sizes(tmp_path):
    out = tmp_path / "c"
    assert run(["blur", "--n", "20", "--scenes", "2", "--img-size", "64", "--sizes", "13:31:2",
                "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest) == 20 and len(list((out / "blurred").iterdir())) == 20
    assert [m["kernel_size"] for m in manifest] == [s for s in range(13, 32, 2) for _ in range(2)]


def test_blur_from_sharp_dir(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    for i in range(3):
        save_png(src / f"p{i}.png", text_scene(40, seed=i))
    out = tmp_path / "c"
    assert run(["blur", "--sharp-dir", str(src), "--n", "5", "--img-size", "32", "--sizes", "7",
                "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "sharp").iterdir())[0] == "00000_p0.png"


def test_seed_determinism(tmp_path):
    args = ["blur", "--n", "4", "--scenes", "2", "--img-size", "32", "--sizes", "7:9:2", "--jobs", "2",
            "--noise-sigma", "0.02", "--seed", "5"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    for f in sorted((tmp_path / "a" / "blurred").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "blurred" / f.name).read_bytes()


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("DEBLUR_LAB_SEED", "11")
    run(["kernel", "gen", "--type", "trajectory", "--out", str(tmp_path / "a")])
    assert json.loads((tmp_path / "a" / "resolved_config.json").read_text())["seed"] == 11
    run(["kernel", "gen", "--type", "trajectory", "--seed", "3", "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "b" / "resolved_config.json").read_text())["seed"] == 3


def test_stats(corpus, tmp_path, capsys):
    assert run(["stats", "--blurred-dir", str(corpus / "blurred"), "--sharp-dir", str(corpus / "sharp"),
                "--img-size", "32", "--out", str(tmp_path / "s")]) == 0
    stats = json.loads((tmp_path / "s" / "stats.json").read_text())
    assert stats["n"] == 8 and stats["reference"]["psnr"]["mean"] == 22.32
    assert "reference" in capsys.readouterr().out


def test_train_eval_deblur(corpus, tmp_path):
    data = ["--blurred-dir", str(corpus / "blurred"), "--sharp-dir", str(corpus / "sharp"),
            "--fractions", "train=0.5,val=0.25,test=0.25", "--reduced", "32"]
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": ModelConfig.reduced(32, patch_px=16).to_dict()}))
    assert run(["train", *data[:-2], "--config", str(cfg), "--epochs", "2", "--lr", "1e-3",
                "--out", str(tmp_path / "t")]) == 0
    rows = (tmp_path / "t" / "history.jsonl").read_text().strip().splitlines()
    assert len(rows) == 2
    resolved = json.loads((tmp_path / "t" / "resolved_config.json").read_text())
    assert resolved["train_config"]["epochs_max"] == 2 and resolved["model_config"]["patch_px"] == 16

    assert run(["eval", *data, "--checkpoint", str(tmp_path / "t" / "best.dbck"),
                "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert len(report["rows"]) == 2 and (tmp_path / "e" / "report.csv").exists()

    img = next((corpus / "blurred").iterdir())
    assert run(["deblur", "--input", str(img), "--checkpoint", str(tmp_path / "t" / "best.dbck"),
                "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "deblurred.png").exists()


def test_deblur_classical(corpus, tmp_path):
    name = sorted(p.stem for p in (corpus / "blurred").iterdir())[0]
    assert run(["deblur", "--input", str(corpus / "blurred" / f"{name}.png"), "--method", "wiener",
                "--kernel", str(corpus / "kernels" / f"{name}.psf"), "--param", "nsr=0.001",
                "--output", "x.png", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "x.png").exists()


def test_gradcheck_command(tmp_path, capsys):
    assert run(["gradcheck", "--seeds", "2", "--out", str(tmp_path / "g")]) == 0
    out = capsys.readouterr().out
    assert "end-to-end max" in out and "FAIL" not in out


@pytest.mark.parametrize("argv", [["bogus"], ["blur", "--nope"], ["kernel"], ["train"],
                                  ["kernel", "gen", "--size", "x"], ["blur", "--sizes", "31:13:2"]])
def test_usage_errors(argv, capsys):
    assert run(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_deblur_needs_one_source(tmp_path, capsys):
    assert run(["deblur", "--input", "x.png", "--out", str(tmp_path)]) == 1


def test_runtime_failure(tmp_path, capsys):
    bs.save_kernel(tmp_path / "k.psf", bs.BlurKernel.delta(3))
    code = run(["deblur", "--input", str(tmp_path / "missing.png"), "--method", "wiener",
                "--kernel", str(tmp_path / "k.psf"), "--out", str(tmp_path / "o")])
    assert code == 2 and "missing.png" in capsys.readouterr().err


def test_bad_checkpoint(tmp_path, capsys):
    (tmp_path / "c.dbck").write_bytes(b"junk")
    save_png(tmp_path / "i.png", np.zeros((8, 8, 3)))
    assert run(["deblur", "--input", str(tmp_path / "i.png"), "--checkpoint", str(tmp_path / "c.dbck"),
                "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("cmd", SUBCOMMANDS, ids=" ".join)
def test_help_lists_defaults(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(cmd + ["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--seed", "--config", "--out", "--verbose"):
        assert flag in text
    assert "(default: out)" in text


def test_writes_only_under_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(["kernel", "gen", "--count", "2", "--out", "only_here"]) == 0
    assert os.listdir(tmp_path) == ["only_here"]
