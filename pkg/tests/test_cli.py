import json

import pytest

from invicl.cli import main, parse_range

TINY = ["--d", "3", "--n", "4", "--layers", "1", "--heads", "2", "--embed", "16", "--batch", "4"]


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


@pytest.fixture
def ckpt_dir(tmp_path, capsys):
    out = tmp_path / "ck"
    code, _ = run(capsys, "train", *TINY, "--steps", "3", "--out", str(out))
    assert code == 0
    return out


def test_parse_range():
    assert parse_range("2..4") == [2, 3, 4]
    assert parse_range("1,5") == [1, 5]


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--steps", "5"])
    assert exc.value.code == 1


def test_zero_steps_is_usage_error(tmp_path, capsys):
    code, out = run(capsys, "train", "--steps", "0", "--out", str(tmp_path / "x"))
    assert code == 1 and "steps" in out.err


def test_train_outputs_and_manifest(ckpt_dir):
    assert {p.name for p in ckpt_dir.iterdir()} == {"ckpt.npz", "loss_trace.csv", "manifest.json"}
    man = json.loads((ckpt_dir / "manifest.json").read_text())
    assert man["config"]["task"]["d"] == 3 and "finished" in man and man["seed"] == 0


def test_train_refuses_overwrite(ckpt_dir, capsys):
    code, _ = run(capsys, "train", *TINY, "--steps", "1", "--out", str(ckpt_dir))
    assert code == 2
    code, _ = run(capsys, "train", *TINY, "--steps", "1", "--out", str(ckpt_dir), "--force")
    assert code == 0


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model: {layers: 1, heads: 2, embed: 8}\ntask: {d: 2, n: 3}\ntrain: {steps: 2, batch: 2, seed: 9}\n")
    code, _ = run(capsys, "train", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "o"))
    assert code == 0
    snap = json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]
    assert snap["train"]["seed"] == 4 and snap["train"]["steps"] == 2 and snap["model"]["embed"] == 8


def test_invicl_absolute_warns(tmp_path, capsys, caplog):
    code, _ = run(capsys, "train", *TINY, "--pe", "absolute", "--steps", "1", "--out", str(tmp_path / "w"))
    assert code == 0 and "breaks permutation invariance" in caplog.text


def test_eval_outputs_are_reproducible(ckpt_dir, tmp_path, capsys):
    ck = str(ckpt_dir / "ckpt.npz")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        code, _ = run(capsys, "eval", "--ckpt", ck, "--lengths", "1..8", "--episodes", "10", "--csv", str(path),
                      "--sensitivity", "5", "--probe", "0,1", "--probe-episodes", "50", "--against", ck)
        assert code == 0
    assert a.read_text() == b.read_text()
    assert len(a.read_text().splitlines()) == 9
    for tag in ("sensitivity", "probe", "extrapolation"):
        assert (tmp_path / f"a.{tag}.csv").read_text() == (tmp_path / f"b.{tag}.csv").read_text()


def test_eval_scale_ood(ckpt_dir, tmp_path, capsys):
    code, out = run(capsys, "eval", "--ckpt", str(ckpt_dir / "ckpt.npz"), "--lengths", "2",
                    "--ood", "scale", "--episodes", "5", "--csv", str(tmp_path / "s.csv"))
    assert code == 0 and ",scale," in (tmp_path / "s.csv").read_text()


def test_eval_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.npz"
    bad.write_text("junk")
    code, _ = run(capsys, "eval", "--ckpt", str(bad), "--lengths", "1..2", "--csv", str(tmp_path / "o.csv"))
    assert code == 2


def test_verify_masks(capsys):
    code, out = run(capsys, "verify", "masks", "--n", "3")
    assert code == 0
    assert "512 masks scanned, 3 invariant, intersection: diagonal" in out.out


def test_verify_gd_csv(tmp_path, capsys):
    csv = tmp_path / "gd.csv"
    code, out = run(capsys, "verify", "gd", "--seeds", "3", "--timing", "fresh", "--csv", str(csv))
    assert code == 0 and "single-layer match" in out.out
    assert csv.read_text().splitlines()[0] == "timing,seed,layer,deviation,deviation_gd"


@pytest.mark.parametrize("scheme,line", [
    ("invicl", "invariance=PASS nonleak=PASS interdep=PASS"),
    ("prefix", "invariance=PASS nonleak=FAIL interdep=PASS"),
    ("boe", "invariance=PASS nonleak=PASS interdep=FAIL"),
    ("ar", "invariance=FAIL nonleak=PASS interdep=PASS"),
])
def test_defcheck(scheme, line, capsys):
    # prefix leakage needs two layers: y_i reaches x_i only through another example's token
    code, out = run(capsys, "defcheck", "--scheme", scheme, "--n", "3", "--seeds", "2",
                    "--layers", "2", "--heads", "2", "--embed", "16", "--init-std", "0.3")
    assert code == 0 and line in out.out


def test_defcheck_mismatch_exits_3(capsys):
    # absolute positions break invariance for InvICL, contradicting its expected row
    code, out = run(capsys, "defcheck", "--scheme", "invicl", "--pe", "absolute", "--n", "3", "--seeds", "2",
                    "--layers", "1", "--heads", "2", "--embed", "16", "--init-std", "0.3")
    assert code == 3 and "invariance=FAIL" in out.out


def test_dump(tmp_path, capsys):
    out = tmp_path / "e.jsonl"
    assert run(capsys, "dump", "--episodes", "3", "--out", str(out))[0] == 0
    assert len(out.read_text().splitlines()) == 3
    assert run(capsys, "dump", "--episodes", "3", "--out", str(out))[0] == 2
