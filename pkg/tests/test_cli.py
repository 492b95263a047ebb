import numpy as np
import pytest

from mscg import cli, gradcheck
from mscg import trainer as T
from mscg.numerics import mten

TINY = """\
seed = 3
epochs = 1
batch_size = 2
base_lr = 0.001
adam_iters = 2
nodes = 4
feature_dim = 8
hidden_dim = 6
dtype = float64
backbone_widths = 4,4,8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out-dir", str(root / "data"), "--count", "4", "--size", "32", "--seed", "1"]) == 0
    (root / "tiny.cfg").write_text(TINY)
    code = cli.main(["train", "--config", str(root / "tiny.cfg"), "--manifest", str(root / "data" / "manifest.txt"),
                     "--out-dir", str(root / "run")])
    assert code == 0
    return root


def test_synth_writes_manifest(workspace):
    lines = (workspace / "data" / "manifest.txt").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 5


def test_train_outputs(workspace, capsys):
    run = workspace / "run"
    assert (run / "checkpoint.zip").exists() and (run / "config.txt").exists()
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2
    assert (run / "weights.csv").read_text().startswith("iteration,class_0")


def test_eval_prints_report(workspace, capsys):
    code = cli.main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.zip"),
                     "--manifest", str(workspace / "data" / "manifest.txt"), "--out-dir", str(workspace / "ev")])
    out = capsys.readouterr().out
    assert code == 0 and out.startswith("class,iou,tp,fp,fn")
    assert (workspace / "ev" / "eval.csv").read_text() == out


def test_dump_graph(workspace):
    out = workspace / "graphs"
    code = cli.main(["dump-graph", "--checkpoint", str(workspace / "run" / "checkpoint.zip"),
                     "--manifest", str(workspace / "data" / "manifest.txt"), "--out-dir", str(out), "--index", "1"])
    assert code == 0
    for k in (0, 1, 2):
        a = mten.load(out / f"a_hat_view{k}.mten")
        assert a.shape == (4, 4) and np.allclose(a, a.T, atol=1e-6)
        assert mten.load(out / f"a_prime_view{k}.mten").shape == (4, 4)


def test_weights_log_matches_training(workspace, capsys):
    code = cli.main(["weights-log", "--config", str(workspace / "tiny.cfg"),
                     "--manifest", str(workspace / "data" / "manifest.txt")])
    assert code == 0
    assert capsys.readouterr().out == (workspace / "run" / "weights.csv").read_text()


def test_resume_with_other_config_is_usage_error(workspace, tmp_path):
    (tmp_path / "other.cfg").write_text(TINY.replace("0.001", "0.002"))
    code = cli.main(["train", "--config", str(tmp_path / "other.cfg"), "--resume",
                     str(workspace / "run" / "checkpoint.zip"),
                     "--manifest", str(workspace / "data" / "manifest.txt"), "--out-dir", str(tmp_path / "r")])
    assert code == 1


def test_gradcheck_selector(capsys):
    assert cli.main(["gradcheck", "--select", "scg"]) == 0
    assert "scg" in capsys.readouterr().out


def test_gradcheck_failure_exit_code(monkeypatch):
    bad = gradcheck.CheckResult("scg", "fake", 1.0, 1, 0.0)
    monkeypatch.setattr(gradcheck, "run", lambda select, seed=0: [bad])
    assert cli.main(["gradcheck"]) == 3


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train", "--manifest", "m.txt"],                      # no --out-dir
    ["gradcheck", "--select", "nothing"],
    ["eval"],                                              # no --checkpoint
])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 1


def test_bad_synth_arguments_are_usage(tmp_path):
    assert cli.main(["synth", "--out-dir", str(tmp_path), "--class-mix", "0-1"]) == 1
    assert cli.main(["synth", "--out-dir", str(tmp_path), "--size", "40"]) == 1


def test_missing_manifest_flag_is_usage(tmp_path):
    assert cli.main(["train", "--out-dir", str(tmp_path)]) == 1


def test_bad_config_is_usage(workspace, tmp_path):
    (tmp_path / "bad.cfg").write_text("nodes = 5\n")
    code = cli.main(["train", "--config", str(tmp_path / "bad.cfg"),
                     "--manifest", str(workspace / "data" / "manifest.txt"), "--out-dir", str(tmp_path)])
    assert code == 1


def test_data_errors_exit_2(workspace, tmp_path):
    assert cli.main(["train", "--manifest", str(tmp_path / "none.txt"), "--out-dir", str(tmp_path)]) == 2
    (tmp_path / "empty.txt").write_text("# nothing\n")
    assert cli.main(["train", "--manifest", str(tmp_path / "empty.txt"), "--out-dir", str(tmp_path)]) == 2
    (tmp_path / "junk.zip").write_bytes(b"xx")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "junk.zip"),
                     "--manifest", str(workspace / "data" / "manifest.txt")]) == 2


def test_numerical_fault_exit_3(workspace, tmp_path, monkeypatch, capsys):
    real = T.compute_loss

    def poisoned(cfg, out, batch, freq):
        loss = real(cfg, out, batch, freq)
        loss.total.value = np.array(np.inf)
        return loss

    monkeypatch.setattr(T, "compute_loss", poisoned)
    code = cli.main(["train", "--config", str(workspace / "tiny.cfg"),
                     "--manifest", str(workspace / "data" / "manifest.txt"), "--out-dir", str(tmp_path)])
    assert code == 3
    assert "last good checkpoint: none" in capsys.readouterr().err
