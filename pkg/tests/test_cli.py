import csv

import numpy as np
import pytest

from longcast import cli
from longcast import model as M
from longcast.data import Normalizer, WindowSpec, load_csv, make_windows, split_chronological
from longcast.training import evaluate

SMALL = ["--seq-len", "48", "--label-len", "24", "--pred-len", "24", "--d-model", "16", "--d-ffn", "32",
         "--enc-heads", "2", "--dec-heads", "2", "--stacks", "2:1", "--dec-layers", "1", "--epochs", "1",
         "--batch-size", "64"]


def _read_kv(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)


def _read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--length", "1000", "--d-x", "3", "--seed", "1", "--out", str(root / "s.csv")]) == 0
    for features in ("S", "M"):
        out = root / f"run{features}"
        assert cli.main(["train", "--data", str(root / "s.csv"), "--features", features, "--out-dir", str(out)]
                        + SMALL) == 0
    return root


def test_train_writes_artifacts(workspace):
    out = workspace / "runS"
    for name in ("checkpoint.ckpt", "history.log", "metrics.txt", "manifest.txt"):
        assert (out / name).is_file(), name
    manifest = _read_kv(out / "manifest.txt")
    assert manifest["command"] == "train" and manifest["seed"] == "0"
    assert manifest["model.seq_len"] == "48" and manifest["model.features"] == "S"
    assert len(manifest["dataset_fingerprint"]) == 16


def test_default_flags_give_reference_architecture(tmp_path):
    args = cli.build_parser().parse_args(["train", "--data", "x.csv", "--out-dir", str(tmp_path)])
    cfg = cli._model_config(args, 7)
    assert (cfg.d_model, cfg.enc_heads, cfg.enc_head_dim, cfg.dec_heads, cfg.dec_head_dim) == (512, 16, 32, 8, 64)
    assert (cfg.d_ffn, cfg.dec_layers, cfg.dropout, cfg.factor) == (2048, 2, 0.1, 5.0)
    assert M.format_stacks(cfg.stacks) == "3:1,1:1/4"
    cli._write_manifest(tmp_path, "train", 0, "-", {"model": cfg.to_dict()})
    manifest = _read_kv(tmp_path / "manifest.txt")
    assert manifest["model.d_model"] == "512" and manifest["model.stacks"] == "3:1,1:1/4"


def test_label_longer_than_seq_rejected(workspace, tmp_path, capsys):
    code = cli.main(["train", "--data", str(workspace / "s.csv"), "--seq-len", "48", "--label-len", "96",
                     "--out-dir", str(tmp_path)])
    assert code == 2
    assert "label_len" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["--seq-len", "0"], ["--factor", "-1"], ["--stacks", "3:x"]])
def test_bad_flag_domains(workspace, tmp_path, argv):
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--data", str(workspace / "s.csv"), "--out-dir", str(tmp_path)] + argv)
    assert info.value.code == 2


def test_missing_data_exit_code(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path)]) == 3


def test_predict_rows_and_inverse_transform(workspace, tmp_path):
    out = tmp_path / "pred"
    assert cli.main(["predict", "--checkpoint", str(workspace / "runS" / "checkpoint.ckpt"),
                     "--data", str(workspace / "s.csv"), "--out-dir", str(out)]) == 0
    rows = _read_rows(out / "predictions.csv")
    assert rows[0] == ["window", "timestamp", "pred_OT", "true_OT"]
    frame = load_csv(workspace / "s.csv")
    test = split_chronological(frame, ratios=(0.7, 0.1, 0.2))[2]
    n_windows = len(test) - 48 - 24 + 1
    assert len(rows) - 1 == 24 * n_windows
    assert sum(1 for r in rows[1:] if r[0] == "0") == 24
    by_time = dict(zip(frame.timestamps.astype("datetime64[s]").astype(str), frame.values[:, 2]))
    for r in rows[1:200]:
        assert abs(float(r[3]) - by_time[r[1].replace(" ", "T")]) <= 1e-9
    model, extras = M.load(workspace / "runS" / "checkpoint.ckpt")
    norm = Normalizer.from_dict(extras["normalizer"])
    windows = make_windows(norm.transform(test), WindowSpec(48, 24, 24), "S")
    from longcast.training import predict
    want = norm.inverse(predict(model, windows), [2]).reshape(-1)
    got = np.array([float(r[2]) for r in rows[1:]])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


def test_dynamic_predict_keeps_schema(workspace, tmp_path):
    paths = []
    for mode in ("generative", "dynamic"):
        out = tmp_path / mode
        assert cli.main(["predict", "--checkpoint", str(workspace / "runS" / "checkpoint.ckpt"),
                         "--data", str(workspace / "s.csv"), "--decode", mode, "--out-dir", str(out)]) == 0
        paths.append(_read_rows(out / "predictions.csv"))
    gen, dyn = paths
    assert gen[0] == dyn[0] and len(gen) == len(dyn)
    assert [r[:2] for r in gen] == [r[:2] for r in dyn]


def test_multivariate_changes_output_width_only(workspace, tmp_path):
    out = tmp_path / "predM"
    assert cli.main(["predict", "--checkpoint", str(workspace / "runM" / "checkpoint.ckpt"),
                     "--data", str(workspace / "s.csv"), "--out-dir", str(out)]) == 0
    rows = _read_rows(out / "predictions.csv")
    assert rows[0] == ["window", "timestamp", "pred_x0", "pred_x1", "pred_OT", "true_x0", "true_x1", "true_OT"]
    single = _read_kv(workspace / "runS" / "metrics.txt")
    multi = _read_kv(workspace / "runM" / "metrics.txt")
    assert single["test_windows"] == multi["test_windows"]


def test_eval_repeatable_and_consistent(workspace, tmp_path):
    reports = []
    for i in range(2):
        out = tmp_path / f"eval{i}"
        assert cli.main(["eval", "--checkpoint", str(workspace / "runS" / "checkpoint.ckpt"),
                         "--data", str(workspace / "s.csv"), "--out-dir", str(out)]) == 0
        reports.append((out / "metrics.txt").read_text())
    assert reports[0] == reports[1]
    mse = float(_read_kv(tmp_path / "eval0" / "metrics.txt")["mse"])
    assert abs(mse - float(_read_kv(workspace / "runS" / "metrics.txt")["test_mse"])) <= 1e-12
    model, extras = M.load(workspace / "runS" / "checkpoint.ckpt")
    test = split_chronological(load_csv(workspace / "s.csv"), ratios=(0.7, 0.1, 0.2))[2]
    norm = Normalizer.from_dict(extras["normalizer"])
    windows = make_windows(norm.transform(test), WindowSpec(48, 24, 24), "S")
    assert abs(evaluate(model, windows).mse - mse) <= 1e-12


def test_seed_env_override(tmp_path, monkeypatch):
    assert cli.main(["synth", "--length", "50", "--seed", "5", "--out", str(tmp_path / "a.csv")]) == 0
    monkeypatch.setenv("LONGCAST_SEED", "5")
    assert cli.main(["synth", "--length", "50", "--seed", "0", "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


def test_bench_reports(tmp_path):
    assert cli.main(["bench", "--head-dim", "8", "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "bench.txt").read_text().splitlines()
    assert len(lines) == 6
    assert lines[-1].startswith("mode=probsparse L=720 dot_products=28800")
    assert all("decoder_forwards=1" in line for line in lines)


def test_ablate_grid(tmp_path):
    out = tmp_path / "ablate"
    assert cli.main(["ablate", "--epochs", "1", "--d-model", "8", "--d-ffn", "16", "--enc-heads", "2",
                     "--dec-heads", "2", "--out-dir", str(out)]) == 0
    rows = _read_rows(out / "metrics.txt")
    assert rows[0] == ["attn", "distil", "decode", "status", "mse", "mae"]
    assert len(rows) == 9
    assert {tuple(r[:3]) for r in rows[1:]} == {(a, d, m) for a in ("probsparse", "full")
                                               for d in ("True", "False") for m in ("generative", "dynamic")}
    assert all(r[3] == "ok" and float(r[4]) >= 0 for r in rows[1:])


def test_ablate_out_of_memory_rows(tmp_path, capsys):
    cfg = M.InformerConfig(**{**cli.ABLATE_DEFAULTS, "d_x": 1, "d_model": 8, "d_ffn": 16, "enc_heads": 2,
                              "dec_heads": 2})
    fits = M.estimate_activation_memory(cfg, 32).bytes
    no_distil = M.estimate_activation_memory(cfg.replace(distil=False), 32).bytes
    full = M.estimate_activation_memory(cfg.replace(attn="full"), 32).bytes
    assert fits < min(no_distil, full)
    budget = fits / 2**20
    out = tmp_path / "oom"
    assert cli.main(["ablate", "--epochs", "1", "--d-model", "8", "--d-ffn", "16", "--enc-heads", "2",
                     "--dec-heads", "2", "--memory-budget-mb", repr(budget), "--out-dir", str(out)]) == 0
    rows = _read_rows(out / "metrics.txt")[1:]
    assert len(rows) == 8
    assert [r[3] for r in rows[:2]] == ["ok", "ok"]
    oom = [r for r in rows if r[3] == "out-of-memory"]
    assert len(oom) == 6 and all(r[4] == "-" for r in oom)
    assert "resource error" in capsys.readouterr().err


def test_train_memory_budget_exit(workspace, tmp_path):
    code = cli.main(["train", "--data", str(workspace / "s.csv"), "--memory-budget-mb", "0.001",
                     "--out-dir", str(tmp_path)] + SMALL)
    assert code == 5
