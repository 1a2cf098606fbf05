import json

import pytest

from conftest import make_toy_dataset
from textrsir.cli import make_run_dir, run
from textrsir.config import RunConfig, load_config, parse_overrides
from textrsir.errors import ConfigurationError


# ---------------------------------------------------------------- config


def test_parse_overrides_typed():
    assert parse_overrides(["train.base_lr=5e-5"]) == {("train", "base_lr"): 5e-5}
    assert parse_overrides(["model.num_sr_units=2"]) == {("model", "num_sr_units"): 2}
    assert parse_overrides(["model.use_te=no"]) == {("model", "use_te"): False}
    assert parse_overrides(["data.caption_text=a=b"]) == {("data", "caption_text"): "a=b"}


@pytest.mark.parametrize("item,token", [
    ("train.nope=1", "train.nope"),
    ("gpu.count=1", "gpu"),
    ("train.epochs=many", "train.epochs"),
    ("epochs=2", "epochs"),
    ("train.epochs", "train.epochs"),
])
def test_parse_overrides_errors_name_the_token(item, token):
    with pytest.raises(ConfigurationError, match=token):
        parse_overrides([item])


def test_load_config_file_then_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nepochs = 3\nbase_lr = 2e-4\n[model]\nchannels = 8\n")
    cfg = load_config(path, parse_overrides(["train.epochs=5"]))
    assert cfg.train.epochs == 5 and cfg.train.base_lr == 2e-4 and cfg.model.channels == 8
    path.write_text("[train]\nwhatever = 1\n")
    with pytest.raises(ConfigurationError, match="whatever"):
        load_config(path)
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.ini")


def test_ini_roundtrip(tmp_path):
    cfg = load_config(None, parse_overrides(["train.seed=7", "model.use_sgm=false",
                                             "data.caption_prompt=Say 100% briefly."]))
    (tmp_path / "c.ini").write_text(cfg.to_ini())
    assert load_config(tmp_path / "c.ini") == cfg
    assert cfg.model_config().seed == 7


def test_run_dirs_never_collide(tmp_path):
    dirs = {make_run_dir(tmp_path, "eval") for _ in range(3)}
    assert len(dirs) == 3


# ---------------------------------------------------------------- commands


@pytest.fixture
def toy(tmp_path):
    manifest = make_toy_dataset(tmp_path / "data", n=3, side=32, n_test=1)
    ini = tmp_path / "run.ini"
    ini.write_text(
        f"[data]\nmanifest = {manifest}\ncaption_provider = cached\n"
        "[model]\nchannels = 4\nnum_sr_units = 1\nsr_unit_kind = residual_conv\n"
        "[train]\nepochs = 1\nbatch_size = 2\n"
    )
    return tmp_path, ini


def _only(parent, prefix):
    (d,) = [p for p in parent.iterdir() if p.name.startswith(prefix)]
    return d


def test_prepare_budget_train_eval(toy, capsys):
    root, ini = toy
    out = root / "runs"
    assert run(["prepare", "--config", str(ini), "--out", str(out)]) == 0
    prep = _only(out, "prepare-") / "prepared"
    assert sorted(p.name for p in prep.iterdir()) == [
        "img00.jpg", "img00.txt", "img01.jpg", "img01.txt", "img02.jpg", "img02.txt", "payloads.jsonl"]
    assert (_only(out, "prepare-") / "config.ini").is_file()

    common = ["--config", str(ini), "--out", str(out), "--set", f"data.prepared_dir={prep}"]
    assert run(["budget", *common]) == 0
    text = capsys.readouterr().out
    for method in ("HR", "downsample", "downsample_compress", "tgrsit"):
        assert method in text
    rows = json.loads((_only(out, "budget-") / "budget.json").read_text())
    assert [r["method"] for r in rows] == ["HR", "downsample", "downsample_compress", "tgrsit"]

    assert run(["train", *common, "--seed", "3"]) == 0
    train_dir = _only(out, "train-")
    assert "seed = 3" in (train_dir / "config.ini").read_text()
    ckpt = train_dir / "checkpoint.pt"
    assert ckpt.is_file() and (train_dir / "loss_trace.csv").is_file()

    assert run(["eval", *common, "--set", f"eval.checkpoint={ckpt}"]) == 0
    eval_dir = _only(out, "eval-")
    for name in ("report.json", "report.txt", "report.csv", "bicubic.json"):
        assert (eval_dir / name).is_file()

    assert run(["plot", "--out", str(out), "--set", f"eval.plot_trace={train_dir / 'loss_trace.csv'}"]) == 0
    assert (_only(out, "plot-") / "loss.png").is_file()

    assert run(["caption-compare", *common, "--set", f"data.compare_dir={prep}",
                "--set", f"eval.checkpoint={ckpt}"]) == 0


def test_train_zero_epochs_is_user_error(toy, capsys):
    root, ini = toy
    assert run(["train", "--config", str(ini), "--set", "train.epochs=0", "--out", str(root / "r")]) == 1
    assert "epochs" in capsys.readouterr().err


@pytest.mark.parametrize("argv,token", [
    (["fly"], "fly"),
    (["train", "--set", "model.wings=2"], "model.wings"),
    (["train", "--bogus-flag"], "--bogus-flag"),
    (["eval", "--set", "eval.checkpoint=/nonexistent.pt"], "eval.checkpoint"),
])
def test_usage_errors_exit_1(tmp_path, capsys, argv, token):
    assert run([*argv, "--out", str(tmp_path)]) == 1
    assert token in capsys.readouterr().err


def test_runtime_failure_exits_2(toy, capsys):
    root, ini = toy
    # nothing listens on port 9, so every caption request fails after retries
    code = run(["prepare", "--config", str(ini), "--out", str(root / "r"),
                "--set", "data.caption_provider=remote",
                "--set", "data.caption_endpoint=http://127.0.0.1:9/caption",
                "--set", "data.caption_retries=0", "--set", "data.caption_timeout=2"])
    assert code == 2
    assert "img00" in capsys.readouterr().err


def test_missing_prepared_files_exit_1(toy, capsys):
    root, ini = toy
    empty = root / "empty"
    empty.mkdir()
    assert run(["train", "--config", str(ini), "--out", str(root / "r"),
                "--set", f"data.prepared_dir={empty}"]) == 1
    assert "img00" in capsys.readouterr().err


def test_module_entry_point(toy):
    import subprocess
    import sys

    root, _ = toy
    proc = subprocess.run([sys.executable, "-m", "textrsir", "nope", "--out", str(root)],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "nope" in proc.stderr


def test_default_config_is_valid():
    cfg = RunConfig()
    cfg.train.validate()
    cfg.model_config().validate()


def test_help_exits_0(tmp_path, capsys):
    assert run(["--help"]) == 0
    assert "--config" in capsys.readouterr().out


def test_frozen_config_reproduces_loss_trace(toy):
    root, ini = toy
    out = root / "runs"
    assert run(["prepare", "--config", str(ini), "--out", str(out)]) == 0
    prep = _only(out, "prepare-") / "prepared"
    assert run(["train", "--config", str(ini), "--out", str(out / "a"),
                "--set", f"data.prepared_dir={prep}", "--seed", "5"]) == 0
    first = _only(out / "a", "train-")
    assert run(["train", "--config", str(first / "config.ini"), "--out", str(out / "b")]) == 0
    second = _only(out / "b", "train-")
    assert (first / "loss_trace.csv").read_bytes() == (second / "loss_trace.csv").read_bytes()
