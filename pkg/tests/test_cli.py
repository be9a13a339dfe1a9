import json
import os

import numpy as np
import pytest

from posmlp import cli
from posmlp.analysis import read_map_csv


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_describe_tiny(capsys):
    code, out, _ = run(capsys, "describe", "--variant", "T", "--out", "/tmp/posmlp_t")
    assert code == 0
    assert "dim 96" in out and "dim 192" in out and "dim 384" in out and "dim 768" in out
    assert "depth 18" in out and "window 7" in out
    assert "20.9M" in out


def test_describe_unknown_variant_exit_2(capsys):
    code, _, err = run(capsys, "describe", "--variant", "XXL")
    assert code == 2
    assert "MICRO" in err and "T" in err


def test_unknown_flag_is_an_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["describe", "--variant", "T", "--frobnicate"])
    assert exc.value.code == 2


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["cost", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--variant", "--gating", "--form", "--use-bias", "--windows", "--out"):
        assert flag in out


def test_cost_micro_schema(tmp_path, capsys):
    code, out, _ = run(capsys, "cost", "--variant", "MICRO", "--out", str(tmp_path))
    assert code == 0
    report = json.loads((tmp_path / "cost.json").read_text())
    assert report["variant"] == "MICRO"
    assert len(report["stages"]) == 4
    for st in report["stages"]:
        assert {"stage", "params", "flops", "breakdown"} <= set(st)
    assert report["total_params"] > 0 and report["total_flops"] > 0
    assert (tmp_path / "resolved_config.json").exists()


def test_cost_tiny_rounds_to_published_budget(tmp_path, capsys):
    code, out, _ = run(capsys, "cost", "--variant", "T", "--out", str(tmp_path))
    assert code == 0
    report = json.loads((tmp_path / "cost.json").read_text())
    assert round(report["total_params"] / 1e6) == 21
    assert abs(report["total_flops"] / 5.2e9 - 1) < 0.1


def test_gradcheck_single_kind_passes(tmp_path, capsys):
    code, out, _ = run(capsys, "gradcheck", "--gating", "ggqpe", "--form", "gramian",
                       "--out", str(tmp_path))
    assert code == 0
    assert "PASS" in out and "FAIL" not in out
    assert "model MICRO kind=ggqpe" in out


def test_attn_and_bias_exports(tmp_path, capsys):
    code, out, _ = run(capsys, "attn", "--variant", "MICRO", "--query", "2",
                       "--layers", "0", "--groups", "0,1", "--out", str(tmp_path))
    assert code == 0
    files = [l for l in out.splitlines() if l.endswith((".csv", ".pgm"))]
    assert len(files) == 4
    grid = read_map_csv(files[0])
    assert grid.shape == (8, 8)

    code, out, _ = run(capsys, "bias", "--variant", "MICRO", "--out", str(tmp_path))
    assert code == 0
    assert any("bias.csv" in l for l in out.splitlines())


def test_bias_empty_report_is_success(tmp_path, capsys):
    code, out, _ = run(capsys, "bias", "--variant", "MICRO", "--no-use-bias",
                       "--out", str(tmp_path))
    assert code == 0
    assert "nothing exported" in out


def test_nonlocality_report(tmp_path, capsys):
    code, out, _ = run(capsys, "nonlocality", "--variant", "MICRO", "--out", str(tmp_path))
    assert code == 0
    payload = json.loads((tmp_path / "nonlocality.json").read_text())
    assert len(payload) == 5
    assert all("layer" in row and "excluded_groups" in row for row in payload)


def test_train_eval_save_load_cycle(tmp_path, capsys):
    out_dir = str(tmp_path / "run")
    code, out, _ = run(capsys, "train", "--variant", "MICRO", "--dataset", "synthetic",
                       "--epochs", "2", "--batch-size", "16", "--per-class", "8",
                       "--seed", "3", "--out", out_dir)
    assert code == 0
    assert "final epoch 1" in out
    assert os.path.exists(os.path.join(out_dir, "metrics.csv"))
    assert os.path.exists(os.path.join(out_dir, "model.pmlp"))
    resolved = json.loads(open(os.path.join(out_dir, "resolved_config.json")).read())
    assert resolved["epochs"] == 2 and resolved["variant"] == "MICRO"

    code, out, _ = run(capsys, "eval", "--variant", "MICRO", "--dataset", "synthetic",
                       "--per-class", "8", "--seed", "3",
                       "--checkpoint", os.path.join(out_dir, "model.pmlp"),
                       "--out", str(tmp_path / "eval"))
    assert code == 0
    assert "top-1 accuracy" in out

    code, out, _ = run(capsys, "load", "--checkpoint", os.path.join(out_dir, "model.pmlp"),
                       "--out", str(tmp_path / "load"))
    assert code == 0
    assert "loaded MICRO" in out


def test_eval_on_binary_dataset_fixture(tmp_path, capsys):
    from posmlp.training import write_cifar_binary

    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(8, 32, 32, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, size=8).astype(np.uint8)
    data = tmp_path / "batch.bin"
    write_cifar_binary(data, images, labels)
    code, out, _ = run(capsys, "eval", "--variant", "MICRO", "--num-classes", "10",
                       "--dataset", "cifar", "--data-path", str(data),
                       "--out", str(tmp_path))
    assert code == 0
    assert "top-1 accuracy" in out


def test_cifar_missing_path_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--variant", "MICRO", "--dataset", "cifar",
                       "--out", str(tmp_path))
    assert code == 2
    assert "data-path" in err


def test_save_then_load(tmp_path, capsys):
    ckpt = str(tmp_path / "m.pmlp")
    code, out, _ = run(capsys, "save", "--variant", "MICRO", "--checkpoint", ckpt,
                       "--out", str(tmp_path))
    assert code == 0 and os.path.exists(ckpt)
    code, out, _ = run(capsys, "load", "--checkpoint", ckpt, "--out", str(tmp_path))
    assert code == 0


def test_load_without_checkpoint_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "load", "--out", str(tmp_path))
    assert code == 2


def test_load_missing_file_is_io_error(tmp_path, capsys):
    code, _, err = run(capsys, "load", "--checkpoint", str(tmp_path / "nope.pmlp"),
                       "--out", str(tmp_path))
    assert code == 3


def test_attn_missing_checkpoint_is_io_error(tmp_path, capsys):
    # a mistyped checkpoint path must not silently export a fresh model
    code, _, err = run(capsys, "attn", "--variant", "MICRO",
                       "--checkpoint", str(tmp_path / "nope.pmlp"),
                       "--out", str(tmp_path))
    assert code == 3
    assert "nope.pmlp" in err


def test_config_file_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"variant": "MICRO", "use_bias": False, "seed": 9}))
    code, out, _ = run(capsys, "bias", "--config", str(cfg), "--out", str(tmp_path / "a"))
    assert code == 0
    assert "nothing exported" in out  # file value applies
    code, out, _ = run(capsys, "bias", "--config", str(cfg), "--use-bias",
                       "--out", str(tmp_path / "b"))
    assert code == 0
    assert any("bias.csv" in l for l in out.splitlines())  # flag wins


def test_config_file_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"varaint": "MICRO"}))
    code, _, err = run(capsys, "describe", "--config", str(cfg), "--out", str(tmp_path))
    assert code == 2
    assert "varaint" in err


def test_reproducible_outputs(tmp_path, capsys):
    for d in ("r1", "r2"):
        code, _, _ = run(capsys, "attn", "--variant", "MICRO", "--seed", "5",
                         "--layers", "0", "--out", str(tmp_path / d))
        assert code == 0
    f1 = sorted((tmp_path / "r1" / "attn").iterdir())
    f2 = sorted((tmp_path / "r2" / "attn").iterdir())
    assert [p.name for p in f1] == [p.name for p in f2]
    for a, b in zip(f1, f2):
        assert a.read_bytes() == b.read_bytes()
    for d in ("c1", "c2"):
        code, _, _ = run(capsys, "cost", "--variant", "MICRO", "--seed", "5",
                         "--out", str(tmp_path / d))
        assert code == 0
    assert (tmp_path / "c1" / "cost.json").read_bytes() == \
        (tmp_path / "c2" / "cost.json").read_bytes()


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("POSMLP_THREADS", "2")
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    cli._apply_thread_cap()
    assert os.environ["OMP_NUM_THREADS"] == "2"
