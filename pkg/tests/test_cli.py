import hashlib
import json

import numpy as np
import pytest

from posecascade import cli, data
from posecascade.cascade import load_cascade


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", str(d), "--count", "6", "--seed", "7", "--size", "32") == 0
    return d


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("run")
    code = run(
        "train",
        "--train", str(synth_dir / "manifest.txt"),
        "--out", str(out),
        "--stages", "2",
        "--sigma", "1.0",
        "--epochs", "2",
        "--batch", "16",
        "--crops-per-joint", "1",
        "--stage1-crops", "1",
        "--input-size", "24",
        "--seed", "3",
        "--threads", "1",
    )
    assert code == 0
    return out


# --- synth ------------------------------------------------------------------------


def test_synth_writes_dataset(synth_dir):
    m = data.load_manifest(synth_dir / "manifest.txt")
    assert len(m.examples) == 6
    for ex in m.examples:
        assert (synth_dir / ex.image_path).exists()


def test_synth_repeat_same_digest(tmp_path, synth_dir):
    d2 = tmp_path / "again"
    assert run("synth", "--out", str(d2), "--count", "6", "--seed", "7", "--size", "32") == 0
    h1 = hashlib.sha256((synth_dir / "manifest.txt").read_bytes()).hexdigest()
    h2 = hashlib.sha256((d2 / "manifest.txt").read_bytes()).hexdigest()
    assert h1 == h2


def test_synth_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        run("synth", "--count", "3")
    assert e.value.code == 1


# --- train ------------------------------------------------------------------------


def test_train_writes_model_and_checkpoints(trained_dir):
    assert (trained_dir / "cascade.model").exists()
    assert (trained_dir / "cascade_stage1.model").exists()
    assert (trained_dir / "cascade_stage2.model").exists()
    model = load_cascade(trained_dir / "cascade.model")
    assert model.num_stages == 2


def test_train_heldout_report_rows(trained_dir):
    lines = (trained_dir / "heldout_report.txt").read_text().strip().splitlines()
    rows = [l for l in lines if l and not l.startswith("#") and not l.startswith("stage ")]
    assert len(rows) == 2  # one per stage
    for row in rows:
        stage, pdj02, err = row.split()
        assert 0.0 <= float(pdj02) <= 1.0
        assert float(err) >= 0.0


def test_train_single_stage(tmp_path, synth_dir):
    out = tmp_path / "s1"
    code = run(
        "train", "--train", str(synth_dir / "manifest.txt"), "--out", str(out),
        "--stages", "1", "--epochs", "1", "--batch", "16", "--stage1-crops", "0",
        "--input-size", "24", "--seed", "1",
    )
    assert code == 0
    model = load_cascade(out / "cascade.model")
    assert model.num_stages == 1


def test_train_determinism_byte_identical(tmp_path, synth_dir):
    outs = []
    for name in ("d1", "d2"):
        out = tmp_path / name
        code = run(
            "train", "--train", str(synth_dir / "manifest.txt"), "--out", str(out),
            "--stages", "2", "--epochs", "1", "--batch", "16", "--crops-per-joint", "1",
            "--stage1-crops", "1", "--input-size", "24", "--seed", "5", "--threads", "1",
        )
        assert code == 0
        outs.append((out / "cascade.model").read_bytes())
    assert outs[0] == outs[1]


def test_train_config_file_with_flag_override(tmp_path, synth_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "train = {m}\nout = {o}\nstages = 1\nepochs = 1\nbatch = 16\n"
        "stage1_crops = 0\ninput_size = 24\nseed = 2\n# comment line\n".format(
            m=synth_dir / "manifest.txt", o=tmp_path / "cfgout"
        )
    )
    assert run("train", "--config", str(cfg)) == 0
    assert (tmp_path / "cfgout" / "cascade.model").exists()
    # flag wins over file value
    assert run("train", "--config", str(cfg), "--out", str(tmp_path / "cfgout2")) == 0
    assert (tmp_path / "cfgout2" / "cascade.model").exists()


def test_train_bad_manifest_is_data_error(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("k=9\nmissing.pgm - " + " ".join(["1 2 1"] * 8) + "\n")
    code = run("train", "--train", str(bad), "--out", str(tmp_path / "o"))
    assert code == 2


def test_train_missing_manifest_file(tmp_path):
    code = run("train", "--train", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o"))
    assert code == 2


# --- eval -------------------------------------------------------------------------


def test_eval_writes_reports(tmp_path, synth_dir, trained_dir):
    out = tmp_path / "eval"
    code = run(
        "eval", "--model", str(trained_dir / "cascade.model"),
        "--manifest", str(synth_dir / "manifest.txt"),
        "--out", str(out), "--fractions", "0.1,0.2,0.3,0.4,0.5",
    )
    assert code == 0
    for s in (1, 2):
        assert (out / f"eval_stage{s}.txt").exists()
        d = json.loads((out / f"eval_stage{s}.json").read_text())
        assert len(d["pdj_fractions"]) == 5
        assert all(0.0 <= r <= 1.0 for row in d["pdj_rates"] for r in row)
        assert all(0.0 <= r <= 1.0 for r in d["pcp_strict"])


def test_eval_k_mismatch(tmp_path, trained_dir):
    bad = tmp_path / "two.txt"
    bad.write_text("k=2\nimg.pgm - 1 2 1 3 4 1\n")
    code = run(
        "eval", "--model", str(trained_dir / "cascade.model"),
        "--manifest", str(bad), "--out", str(tmp_path / "o"),
    )
    assert code == 2


def test_eval_perfect_prediction_fixture(tmp_path, trained_dir, synth_dir, monkeypatch):
    # force predictions equal to ground truth: all rates must be 1.0
    from posecascade import cascade as casc

    m = data.load_manifest(synth_dir / "manifest.txt")

    def fake_predict_many(model, examples, threads=1):
        return [casc.CascadePrediction([ex.pose, ex.pose]) for ex in examples]

    monkeypatch.setattr(cli.casc, "predict_many", fake_predict_many)
    out = tmp_path / "perfect"
    code = run(
        "eval", "--model", str(trained_dir / "cascade.model"),
        "--manifest", str(synth_dir / "manifest.txt"), "--out", str(out),
    )
    assert code == 0
    d = json.loads((out / "eval_stage2.json").read_text())
    assert all(r == 1.0 for r in d["pcp_strict"])
    assert all(r == 1.0 for row in d["pdj_rates"] for r in row)


# --- predict ----------------------------------------------------------------------


def test_predict_outputs_k_lines_per_stage(capsys, synth_dir, trained_dir):
    m = data.load_manifest(synth_dir / "manifest.txt")
    img = synth_dir / m.examples[0].image_path
    code = run("predict", "--model", str(trained_dir / "cascade.model"), "--image", str(img))
    assert code == 0
    out_lines = capsys.readouterr().out.strip().splitlines()
    model = load_cascade(trained_dir / "cascade.model")
    k = model.tree.k
    for s in range(1, model.num_stages + 1):
        stage_lines = [l for l in out_lines if l.startswith(f"{s} ")]
        assert len(stage_lines) == k


def test_predict_svg_line_count(tmp_path, synth_dir, trained_dir):
    m = data.load_manifest(synth_dir / "manifest.txt")
    img = synth_dir / m.examples[0].image_path
    svg_path = tmp_path / "pose.svg"
    code = run(
        "predict", "--model", str(trained_dir / "cascade.model"),
        "--image", str(img), "--render", str(svg_path),
    )
    assert code == 0
    svg = svg_path.read_text()
    model = load_cascade(trained_dir / "cascade.model")
    assert svg.count("<line ") == len(model.tree.limbs)


def test_predict_explicit_box_zero_model(tmp_path, synth_dir, trained_dir, capsys):
    # zero the loaded model: all joints print at the box center
    model = load_cascade(trained_dir / "cascade.model")
    for net in model.stages:
        for p in net.params:
            if p is not None:
                p["w"][:] = 0.0
                p["b"][:] = 0.0
    from posecascade.cascade import save_cascade

    zpath = tmp_path / "zero.model"
    save_cascade(model, zpath)
    m = data.load_manifest(synth_dir / "manifest.txt")
    img = synth_dir / m.examples[0].image_path
    code = run("predict", "--model", str(zpath), "--image", str(img), "--box", "16,16,32,32")
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    stage1 = [l for l in lines if l.startswith("1 ")]
    for line in stage1:
        _, _, x, y = line.split()
        assert float(x) == pytest.approx(16.0)
        assert float(y) == pytest.approx(16.0)


def test_predict_bad_image_is_data_error(tmp_path, trained_dir):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"garbage")
    code = run("predict", "--model", str(trained_dir / "cascade.model"), "--image", str(bad))
    assert code == 2
