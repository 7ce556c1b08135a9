"""End-to-end tests of the command-line interface (in-process, no subshell)."""

from pathlib import Path

import pytest

from milslide import eval as ev
from milslide import slide as sl
from milslide.cli import (DEFAULT_REPEATS, DEFAULT_W1_VALUES, main,
                          parse_run_config)
from milslide.errors import ConfigError

TINY_MODEL_LINES = ["conv_layers=4:3:2", "pool=2", "hidden_units=8"]


def write_config(path, manifest, out, *extra):
    lines = [f"manifest={manifest}", f"out={out}",
             "epochs=1", "batch_size=8", "lr=0.001", "seed=3",
             *TINY_MODEL_LINES, *extra]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def run(args):
    return main([str(a) for a in args])


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_writes_corpus_and_summary(tmp_path, capsys):
    out = tmp_path / "corpus"
    assert run(["gen-data", "--out", out, "--slides", 10, "--prevalence", "0.2",
                "--seed", 5, "--side", 256]) == 0
    printed = capsys.readouterr().out
    assert "10 slides" in printed and "(2 positive)" in printed
    entries = sl.read_manifest(out / "manifest.csv")
    assert len(entries) == 10
    assert sum(e.label for e in entries) == 2


def test_gen_data_validates_slide_count(tmp_path, capsys):
    assert run(["gen-data", "--out", tmp_path / "x", "--slides", 9]) == 1
    assert "at least 10" in capsys.readouterr().err


def test_gen_data_refuses_nonempty_dir_without_force(tmp_path, capsys):
    out = tmp_path / "corpus"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    args = ["gen-data", "--out", out, "--slides", 10, "--side", 256]
    assert run(args) == 1
    assert "--force" in capsys.readouterr().err
    assert run(args + ["--force"]) == 0


def test_gen_data_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    flags = ["--slides", 10, "--seed", 9, "--side", 256]
    assert run(["gen-data", "--out", a] + flags) == 0
    assert run(["gen-data", "--out", b] + flags) == 0
    ta, tb = tree_bytes(a), tree_bytes(b)
    assert list(ta) == list(tb)
    assert all(ta[k] == tb[k] for k in ta)


def test_hundred_slide_split_arithmetic():
    assert sl.split_counts(100) == (70, 15, 15)
    assert round(0.2 * 100) == 20
    assert round(sl.split_counts(100)[0] * 1.0) + 30 == 100


# ---------------------------------------------------------------------------
# run-config parsing


def test_run_config_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=1\nlearning_rate=0.1\n")
    with pytest.raises(ConfigError, match="line 2.*learning_rate"):
        parse_run_config(cfg)


def test_run_config_line_diagnostics(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=1\nnonsense\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_run_config(cfg)
    cfg.write_text("epochs=1\nepochs=2\n")
    with pytest.raises(ConfigError, match="line 2.*duplicate"):
        parse_run_config(cfg)
    cfg.write_text("epochs=abc\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_run_config(cfg)
    cfg.write_text("w1=1.5\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_run_config(cfg)


def test_run_config_parses_model_and_sweep_keys(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\n\nconv_layers=4:3:2\npool=2\nhidden_units=8\n"
                   "w1_values=0.5, 0.9\nsizes=2,4\nrepeats=3\nmagnifications=20x,5x\n")
    parsed = parse_run_config(cfg)
    assert parsed.train.model.conv_layers == ((4, 3, 2),)
    assert parsed.train.model.hidden_units == 8
    assert parsed.w1_values == (0.5, 0.9)
    assert parsed.sizes == (2, 4)
    assert parsed.repeats == 3
    assert parsed.magnifications == ("20x", "5x")


def test_run_config_rejects_bad_model_architecture(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("conv_layers=4:3\n")
    with pytest.raises(ConfigError):
        parse_run_config(cfg)


def test_default_weight_sweep_shape():
    assert DEFAULT_W1_VALUES == (0.5, 0.7, 0.9, 0.95, 0.99)
    assert len(DEFAULT_W1_VALUES) * DEFAULT_REPEATS == 25


def test_train_requires_existing_manifest(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.cfg", tmp_path / "absent.csv", tmp_path / "out")
    assert run(["train", "--config", cfg]) == 2
    assert "does not exist" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train / eval / embed round trip


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    corpus, _ = tiny_corpus
    work = tmp_path_factory.mktemp("cli_train")
    cfg = write_config(work / "run.cfg", corpus / "manifest.csv", work / "run")
    assert run(["train", "--config", cfg]) == 0
    return corpus, work / "run", cfg


def test_train_outputs(trained, capsys):
    _, out, _ = trained
    assert (out / "checkpoint.milc").is_file()
    history = (out / "history.csv").read_text()
    assert history.startswith("epoch,train_loss,val_balanced_error,val_fnr,val_fpr\n")
    assert len(history.strip().split("\n")) == 2
    svg = (out / "history.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_train_rerun_is_byte_identical(trained, tmp_path):
    corpus, first_out, _ = trained
    cfg = write_config(tmp_path / "run.cfg", corpus / "manifest.csv", tmp_path / "run")
    assert run(["train", "--config", cfg]) == 0
    assert ((tmp_path / "run" / "history.csv").read_bytes()
            == (first_out / "history.csv").read_bytes())
    assert ((tmp_path / "run" / "checkpoint.milc").read_bytes()
            == (first_out / "checkpoint.milc").read_bytes())


def test_train_worker_count_does_not_change_results(trained, tmp_path, monkeypatch):
    corpus, first_out, _ = trained
    cfg = write_config(tmp_path / "run.cfg", corpus / "manifest.csv", tmp_path / "run")
    monkeypatch.setenv("MILPATH_WORKERS", "4")
    assert run(["train", "--config", cfg]) == 0
    assert ((tmp_path / "run" / "history.csv").read_bytes()
            == (first_out / "history.csv").read_bytes())


def test_eval_checkpoint_outputs(trained, tmp_path, capsys):
    corpus, run_dir, _ = trained
    out = tmp_path / "eval"
    assert run(["eval", "--checkpoint", run_dir / "checkpoint.milc",
                "--manifest", corpus / "manifest.csv", "--split", "test",
                "--out", out]) == 0
    printed = capsys.readouterr().out
    assert "AUC " in printed and "balanced error" in printed
    for name in ("metrics.csv", "roc.csv", "roc.svg", "scores.csv"):
        assert (out / name).is_file()
    metrics = dict(line.split(",") for line in
                   (out / "metrics.csv").read_text().strip().split("\n")[1:])
    assert 0.0 <= float(metrics["auc"]) <= 1.0
    rows = ev.read_scores_csv(out / "scores.csv")
    assert len(rows) == 3    # test split of the tiny corpus


def test_eval_scores_mode_prints_auc(tmp_path, capsys):
    scores = tmp_path / "scores.csv"
    scores.write_text("slide_id,label,score,magnification\n"
                      "a,1,0.9,20x\nb,1,0.8,20x\nc,0,0.2,20x\nd,0,0.1,20x\n")
    assert run(["eval", "--scores", scores, "--out", tmp_path / "out"]) == 0
    assert "AUC 1.000" in capsys.readouterr().out


def test_eval_rejects_malformed_scores_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("slide_id,label,score,magnification\na,1,not-a-number,20x\n")
    assert run(["eval", "--scores", bad, "--out", tmp_path / "out"]) == 2
    assert "line 2" in capsys.readouterr().err


def test_embed_outputs(trained, tmp_path, capsys):
    corpus, run_dir, _ = trained
    out = tmp_path / "emb"
    assert run(["embed", "--checkpoint", run_dir / "checkpoint.milc",
                "--manifest", corpus / "manifest.csv", "--split", "test",
                "--out", out]) == 0
    emb = (out / "embedding.csv").read_text()
    assert emb.startswith("slide_id,row,col,is_top,label,x,y\n")
    assert (out / "embedding.svg").read_text().count("circle") > 3
    assert "explained variances" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# sweep + ensemble


def test_weight_sweep_command(trained, tmp_path, capsys):
    corpus, _, _ = trained
    cfg = write_config(tmp_path / "run.cfg", corpus / "manifest.csv",
                       tmp_path / "sweep", "w1_values=0.5,0.9", "repeats=1")
    assert run(["sweep", "--kind", "weight", "--config", cfg]) == 0
    assert "2/2 cells completed" in capsys.readouterr().out
    table = (tmp_path / "sweep" / "sweep_weight.csv").read_text()
    lines = table.strip().split("\n")
    assert lines[0] == "sweep_param,repeat,seed,best_val_balanced_error,best_epoch"
    assert len(lines) == 3
    assert (tmp_path / "sweep" / "sweep_weight.svg").is_file()


def test_magnification_sweep_then_ensemble(trained, tmp_path, capsys):
    corpus, _, _ = trained
    cfg = write_config(tmp_path / "run.cfg", corpus / "manifest.csv",
                       tmp_path / "mags", "magnifications=20x,5x")
    assert run(["sweep", "--kind", "magnification", "--config", cfg]) == 0
    for name in ("sweep_magnification.csv", "scores_20x_val.csv",
                 "scores_20x_test.csv", "scores_5x_val.csv", "scores_5x_test.csv"):
        assert (tmp_path / "mags" / name).is_file(), name
    capsys.readouterr()

    out = tmp_path / "ens"
    assert run(["ensemble", "--scores", tmp_path / "mags" / "scores_20x_test.csv",
                tmp_path / "mags" / "scores_5x_test.csv", "--mode", "max",
                "--out", out]) == 0
    assert "AUC " in capsys.readouterr().out
    combined = (out / "combined.csv").read_text()
    assert combined.startswith("slide_id,label,score,magnification,mode\n")
    assert ",20x+5x,max" in combined


def test_ensemble_single_input_passes_scores_through(tmp_path):
    scores = tmp_path / "s.csv"
    rows = [("a", 1, 0.75), ("b", 0, 0.25)]
    scores.write_text(ev.scores_csv(rows, "10x"))
    assert run(["ensemble", "--scores", scores, "--mode", "max",
                "--out", tmp_path / "out"]) == 0
    combined = (tmp_path / "out" / "combined.csv").read_text().strip().split("\n")
    got = [line.split(",") for line in combined[1:]]
    assert [(g[0], int(g[1]), float(g[2])) for g in got] == rows


def test_unknown_config_key_exits_2(trained, tmp_path, capsys):
    corpus, _, _ = trained
    cfg = write_config(tmp_path / "run.cfg", corpus / "manifest.csv",
                       tmp_path / "out", "mystery_knob=1")
    assert run(["train", "--config", cfg]) == 2
    assert "mystery_knob" in capsys.readouterr().err


def test_no_subcommand_prints_help(capsys):
    assert main([]) == 2
    assert "gen-data" in capsys.readouterr().out
