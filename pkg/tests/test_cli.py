import json
import os

from cgmlp.cli import run_cli
from cgmlp.models import load_checkpoint


def run(capsys, *argv):
    code = run_cli(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_unknown_subcommand(capsys):
    code, _, _ = run(capsys, "frobnicate")
    assert code == 1


def test_unknown_flag_rejected(capsys):
    code, _, _ = run(capsys, "train", "--frobnicate", "1")
    assert code == 1


def test_train_zero_epochs_is_usage_error(cifar10_dir, capsys):
    code, _, err = run(capsys, "train", "--data-dir", cifar10_dir, "--epochs", "0")
    assert code == 1
    assert "epochs" in err


def test_missing_data_dir_is_usage_error(capsys, monkeypatch):
    monkeypatch.delenv("CGMLP_DATA_DIR", raising=False)
    code, _, err = run(capsys, "train", "--epochs", "1")
    assert code == 1
    assert "data" in err.lower()


def test_eval_missing_checkpoint_is_runtime_error(cifar10_dir, capsys):
    code, _, err = run(capsys, "eval", "--data-dir", cifar10_dir,
                       "--checkpoint", "/nonexistent.ckpt")
    assert code == 2


def test_resolved_config_printed(cifar10_dir, capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--model", "gmlp4", "--d-model", "4",
                       "--d-ffn", "8", "--precision", "f64", "--tolerance", "1e-3")
    assert "resolved configuration:" in out
    assert "seed = 0" in out
    assert "precision = 'f64'" in out


def test_gradcheck_small_model_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--model", "gmlp4", "--d-model", "4",
                       "--d-ffn", "8", "--precision", "f64")
    assert code == 0
    assert "PASS" in out
    assert "max_rel_err=" in out


def test_train_eval_visualize_workflow(cifar10_dir, tmp_path, capsys):
    out_dir = str(tmp_path / "run")
    code, out, err = run(capsys, "train", "--data-dir", cifar10_dir,
                         "--model", "cgmlp2", "--d-model", "16", "--d-ffn", "32",
                         "--epochs", "1", "--batch-size", "64", "--seed", "3",
                         "--out-dir", out_dir)
    assert code == 0, err
    for fname in ("history.csv", "report.txt", "model.ckpt"):
        assert os.path.exists(os.path.join(out_dir, fname)), fname
    ckpt = os.path.join(out_dir, "model.ckpt")
    model = load_checkpoint(ckpt)
    assert model.config.d_model == 16

    code, out, err = run(capsys, "eval", "--data-dir", cifar10_dir,
                         "--checkpoint", ckpt)
    assert code == 0, err
    assert "test_acc=" in out

    code, out, err = run(capsys, "visualize", "--data-dir", cifar10_dir,
                         "--checkpoint", ckpt, "--out-dir", out_dir,
                         "--image-index", "1")
    assert code == 0, err
    fm_dir = os.path.join(out_dir, "featuremaps")
    files = os.listdir(fm_dir)
    # cgmlp2 stem: 32-channel and 64-channel taps, act + pool each
    assert len(files) == 2 * (32 + 64)


def test_visualize_rejects_stemless_model(cifar10_dir, tmp_path, capsys):
    out_dir = str(tmp_path / "run")
    code, _, err = run(capsys, "train", "--data-dir", cifar10_dir,
                       "--model", "gmlp4", "--d-model", "16", "--d-ffn", "32",
                       "--epochs", "1", "--batch-size", "64", "--out-dir", out_dir)
    assert code == 0, err
    code, _, err = run(capsys, "visualize", "--data-dir", cifar10_dir,
                       "--checkpoint", os.path.join(out_dir, "model.ckpt"),
                       "--out-dir", out_dir)
    assert code == 1
    assert "no conv stem" in err


def test_compare_writes_csv_and_checkpoints(cifar10_dir, tmp_path, capsys):
    out_dir = str(tmp_path / "cmp")
    code, out, err = run(capsys, "compare", "--data-dir", cifar10_dir,
                         "--model", "gmlp4", "--model", "cgmlp2",
                         "--d-model", "16", "--d-ffn", "32",
                         "--epochs", "1", "--batch-size", "64", "--seed", "7",
                         "--out-dir", out_dir)
    assert code == 0, err
    csv = open(os.path.join(out_dir, "history.csv")).read()
    assert csv.startswith("model,epoch,train_loss,train_acc,val_loss,val_acc\n")
    assert "gmlp4," in csv and "cgmlp2," in csv
    assert os.path.exists(os.path.join(out_dir, "model_gmlp4.ckpt"))
    assert os.path.exists(os.path.join(out_dir, "model_cgmlp2.ckpt"))


def test_custom_json_config(cifar10_dir, tmp_path, capsys):
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps({
        "stem_layers": 1, "stem_channels": [8], "d_model": 16, "d_ffn": 32,
        "num_blocks": 2, "gating": ["spatial", "channel"],
    }))
    out_dir = str(tmp_path / "run")
    code, _, err = run(capsys, "train", "--data-dir", cifar10_dir,
                       "--model", str(cfg_path), "--epochs", "1",
                       "--batch-size", "64", "--out-dir", out_dir)
    assert code == 0, err
    model = load_checkpoint(os.path.join(out_dir, "model.ckpt"))
    assert model.config.gating == ("spatial", "channel")


def test_env_var_data_dir_fallback(cifar10_dir, capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("CGMLP_DATA_DIR", cifar10_dir)
    out_dir = str(tmp_path / "envrun")
    code, _, err = run(capsys, "train", "--model", "gmlp4", "--d-model", "16",
                       "--d-ffn", "32", "--epochs", "1", "--batch-size", "64",
                       "--out-dir", out_dir)
    assert code == 0, err
