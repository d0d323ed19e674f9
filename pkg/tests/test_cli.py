import numpy as np
import pytest

from tvmerge.cli import main
from tvmerge.params import load_checkpoint


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A small gen-data / pretrain / finetune run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--tasks", "3", "--dim", "8", "--per-class", "30", "--seed", "2"]) == 0
    assert main(["pretrain", "--data", str(data), "--out", str(root / "pre.tvck"), "--hidden", "8", "--seed", "2"]) == 0
    fts = []
    for k in range(3):
        out = root / f"ft{k}.tvck"
        assert main(["finetune", "--data", str(data), "--init", str(root / "pre.tvck"), "--task", f"task{k}",
                     "--out", str(out), "--seed", str(3 + k)]) == 0
        fts.append(str(out))
    return root, data, str(root / "pre.tvck"), fts


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["merge", "--scheme", "average"]) == 2
    assert "missing required" in capsys.readouterr().err
    assert main(["merge", "--scheme", "bogus"]) == 2


def test_domain_error_exits_1(tmp_path, capsys, pipeline):
    root, data, pre, fts = pipeline
    bad = tmp_path / "bad.tvck"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert main(["merge", "--scheme", "average", "--pretrained", str(bad), "--finetuned", *fts,
                 "--out", str(tmp_path / "m.tvck")]) == 1
    assert capsys.readouterr().err.startswith("BadMagic")


def test_average_scheme_is_coordinate_mean(pipeline, tmp_path):
    _, _, pre, fts = pipeline
    out = tmp_path / "avg.tvck"
    assert main(["merge", "--scheme", "average", "--pretrained", pre, "--finetuned", *fts, "--out", str(out)]) == 0
    mean = np.mean([load_checkpoint(f).flat() for f in fts], axis=0)
    np.testing.assert_allclose(load_checkpoint(out).flat(), mean, rtol=1e-6, atol=1e-7)


def test_lambda_zero_is_pretrained(pipeline, tmp_path):
    _, _, pre, fts = pipeline
    out = tmp_path / "ta.tvck"
    assert main(["merge", "--scheme", "task-arithmetic", "--lambda", "0", "--pretrained", pre, "--finetuned", *fts,
                 "--out", str(out)]) == 0
    merged, base = load_checkpoint(out), load_checkpoint(pre)
    assert merged.flat().tobytes() == base.flat().tobytes()
    assert (tmp_path / "ta.tvck.config.resolved").exists()


def test_config_precedence_and_duplicate_key(pipeline, tmp_path):
    _, data, pre, fts = pipeline
    cfg = tmp_path / "run.cfg"
    cfg.write_text("lr=0.01\nsteps=3\n")
    common = ["adamerge", "--pretrained", pre, "--finetuned", *fts, "--data", str(data), "--config", str(cfg)]
    assert main(common + ["--out", str(tmp_path / "a.tvck"), "--lr", "0.001", "--out-dir", str(tmp_path / "a")]) == 0
    resolved = (tmp_path / "a" / "config.resolved").read_text().splitlines()
    assert "lr=0.001" in resolved and "steps=3" in resolved and "seed=0" in resolved
    cfg.write_text("lr=0.01\nlr=0.02\n")
    assert main(common + ["--out", str(tmp_path / "b.tvck")]) == 2


def test_resolved_config_reproduces_run(pipeline, tmp_path):
    _, data, pre, fts = pipeline
    first = tmp_path / "first"
    assert main(["adamerge", "--pretrained", pre, "--finetuned", *fts, "--data", str(data), "--steps", "20",
                 "--out", str(tmp_path / "first.tvck"), "--out-dir", str(first)]) == 0
    replay = tmp_path / "replay.cfg"
    replay.write_text((first / "config.resolved").read_text())
    second = tmp_path / "second"
    assert main(["adamerge", "--config", str(replay), "--out", str(tmp_path / "second.tvck"),
                 "--out-dir", str(second)]) == 0
    for name in ("coeffs.csv", "trajectory.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    assert (tmp_path / "first.tvck").read_bytes() == (tmp_path / "second.tvck").read_bytes()


@pytest.mark.parametrize("scheme", ["ties", "adamerging-task", "adamerging++-layer"])
def test_other_schemes_run(pipeline, tmp_path, scheme):
    _, data, pre, fts = pipeline
    out = tmp_path / "m.tvck"
    assert main(["merge", "--scheme", scheme, "--pretrained", pre, "--finetuned", *fts, "--data", str(data),
                 "--steps", "10", "--out", str(out)]) == 0
    assert load_checkpoint(out).meta["scheme"] == scheme


def test_eval_and_analyze_outputs(pipeline, tmp_path):
    _, data, pre, fts = pipeline
    run = tmp_path / "run"
    assert main(["adamerge", "--pretrained", pre, "--finetuned", *fts, "--data", str(data), "--steps", "10",
                 "--out", str(tmp_path / "m.tvck"), "--out-dir", str(run)]) == 0
    out = tmp_path / "report"
    assert main(["analyze", "--model", str(tmp_path / "m.tvck"), "--data", str(data), "--out-dir", str(out),
                 "--run-dir", str(run)]) == 0
    for name in ("eval.json", "correlation.csv", "coeffs.csv", "trajectory.csv", "config.resolved"):
        assert (out / name).exists()
    noisy = tmp_path / "noisy"
    assert main(["eval", "--model", str(tmp_path / "m.tvck"), "--data", str(data), "--out-dir", str(noisy),
                 "--corruption", "gauss_noise", "--severity", "0.5", "--tasks", "task0"]) == 0
    assert '"task0"' in (noisy / "eval.json").read_text()


def test_inputs_not_modified(pipeline, tmp_path):
    _, data, pre, fts = pipeline
    before = {f: open(f, "rb").read() for f in [pre, *fts]}
    main(["merge", "--scheme", "ties", "--pretrained", pre, "--finetuned", *fts, "--out", str(tmp_path / "t.tvck")])
    assert before == {f: open(f, "rb").read() for f in [pre, *fts]}
