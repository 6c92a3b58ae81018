import json

import pytest

from beatquant.cli import EXIT_INPUT, EXIT_OK, EXIT_USAGE, read_config_file, run


@pytest.fixture(scope="module")
def noiseless(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["synth", "--out", str(out), "--pieces", "3", "--seed", "5", "--sigma", "0", "--no-dur-noise"]) == 0
    return out


def test_synth_layout_and_seed_echo(tmp_path, capsys):
    assert run(["synth", "--out", str(tmp_path), "--pieces", "2", "--seed", "9"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    assert record["seed"] == 9 and record["pieces"] == 2
    for sub, ext in (("perf", "mid"), ("beats", "tsv"), ("score", "mid"), ("score_text", "score")):
        assert sorted(p.name for p in (tmp_path / sub).iterdir()) == [f"piece_0000.{ext}", f"piece_0001.{ext}"]


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["synth", "--out", str(tmp_path / name), "--pieces", "2", "--seed", "1"]) == 0
    for f in (tmp_path / "a").rglob("*.*"):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_baseline_quantize_matches_generator(noiseless, tmp_path):
    for k in range(3):
        stem = f"piece_{k:04d}"
        out = tmp_path / f"{stem}.score"
        code = run(["quantize", "--baseline", str(noiseless / "perf" / f"{stem}.mid"),
                    str(noiseless / "beats" / f"{stem}.tsv"), "--out-score", str(out),
                    "--out-midi", str(tmp_path / f"{stem}.mid")])
        assert code == EXIT_OK
        assert out.read_text() == (noiseless / "score_text" / f"{stem}.score").read_text()
        assert (tmp_path / f"{stem}.mid").read_bytes() == (noiseless / "score" / f"{stem}.mid").read_bytes()


def test_eval_identical_files(noiseless, capsys):
    ref = str(noiseless / "score_text" / "piece_0000.score")
    assert run(["eval", ref, ref, "--method", "oracle"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "Method" in text and "ε_onset" in text and "MUSTER-style" in text
    assert "oracle |     0.00 |     0.00" in text and "F1 1.000" in text


def test_eval_directories_json(noiseless, capsys):
    d = str(noiseless / "score_text")
    assert run(["eval", d, d, "--format", "json"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    assert record["files"] == 3 and record["onset_f1"] == 1.0 and record["epsilon_offset"] == 0.0


def test_tokenize_score_and_midi(noiseless, capsys):
    assert run(["tokenize", str(noiseless / "score_text" / "piece_0000.score")]) == EXIT_OK
    tokens = capsys.readouterr().out.split()
    assert tokens[0] == "1" and tokens[-1] == "2" and tokens[1] == "3"
    assert run(["tokenize", "--json", str(noiseless / "perf" / "piece_0000.mid"),
                str(noiseless / "beats" / "piece_0000.tsv")]) == EXIT_OK
    names = [t["name"] for t in json.loads(capsys.readouterr().out)]
    assert names[:2] == ["BOS", "BAR"] and names.count("BAR") == 8


def test_build_dataset_and_train(noiseless, tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert run(["build-dataset", "--perf-dir", str(noiseless / "perf"), "--beats-dir", str(noiseless / "beats"),
                "--score-dir", str(noiseless / "score"), "--out", str(corpus), "--seed", "0"]) == EXIT_OK
    stats = json.loads(capsys.readouterr().out)
    assert stats["train"] + stats["valid"] + stats["test"] == stats["windows"] == 12
    assert (corpus / "train" / "manifest.jsonl").exists()

    cfg = tmp_path / "train.cfg"
    cfg.write_text("# tiny model\nsteps = 3\nd_model = 16\nn-heads = 2\nd_ffn = 32\neval_every = 2\n")
    ckpt = tmp_path / "m.ckpt"
    code = run(["train", "--config", str(cfg), "--corpus", str(corpus), "--out", str(ckpt), "--seed", "1",
                "--steps", "4", "--report", str(tmp_path / "r.jsonl")])
    assert code == EXIT_OK
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    # flag overrides the file's steps = 3
    assert sum(json.loads(line)["kind"] == "step" for line in lines) == 4
    capsys.readouterr()
    code = run(["quantize", "--checkpoint", str(ckpt), str(noiseless / "perf" / "piece_0001.mid"),
                str(noiseless / "beats" / "piece_0001.tsv")])
    assert code == EXIT_OK
    captured = capsys.readouterr()
    assert captured.out.startswith("measure 0 ")
    assert json.loads(captured.err)["segments"] == 4


def test_unknown_flag_is_usage_error(capsys):
    assert run(["eval", "--bogus", "a", "b"]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert err.startswith("error: kind=usage") and "usage:" in err


def test_no_command_is_usage_error():
    assert run([]) == EXIT_USAGE


def test_quantize_needs_model_or_baseline(noiseless):
    assert run(["quantize", str(noiseless / "perf" / "piece_0000.mid"), str(noiseless / "beats" / "piece_0000.tsv")]) \
        == EXIT_USAGE


def test_bad_input_files(tmp_path, capsys):
    bad = tmp_path / "bad.mid"
    bad.write_bytes(b"garbage")
    beats = tmp_path / "b.tsv"
    beats.write_text("0.0\t0.0\tdb\n0.5\t0.5\tb\n")
    assert run(["quantize", "--baseline", str(bad), str(beats)]) == EXIT_INPUT
    line = capsys.readouterr().err.strip()
    assert line.startswith("error: kind=input reason=") and "\n" not in line
    assert run(["eval", str(tmp_path / "missing.score"), str(tmp_path / "missing.score")]) == EXIT_INPUT


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = blue\n")
    assert run(["synth", "--config", str(cfg), "--out", str(tmp_path), "--seed", "1"]) == EXIT_USAGE


def test_config_supplies_required_seed(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 4\npieces = 1\nno_dur_noise = true\n")
    assert run(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["seed"] == 4
    assert read_config_file(cfg) == {"seed": "4", "pieces": "1", "no_dur_noise": "true"}
