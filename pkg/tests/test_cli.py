import hashlib
import json

import pytest

from mrssm.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from mrssm.config import DEFAULTS, ConfigError, RunConfig

TINY = [
    "sim.world_size=40", "sim.image_size=8", "data.n_train=4", "data.n_val=2", "data.length=60",
    "model.deter_dim=8", "model.stoch_dim=3", "model.embed_dim=8", "model.hidden_dim=8",
    "model.image_channels=[2,2,4]", "train.epochs=1", "train.sequence_length=8", "train.batch_size=2",
    "eval.horizons=[5,10]",
]


def sets(items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.write(tmp_path / "c.json")
    again = RunConfig.load(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="train.betta"):
        RunConfig({"train.betta": 1.0})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"sim.gian": 3}))
    with pytest.raises(ConfigError, match="sim.gian"):
        RunConfig.load(p)


def test_overrides_and_coercion():
    cfg = RunConfig.load(None, ["train.beta=0.5", "train.epochs=3", "eval.horizons=[5]", "train.elbo_variant=mvae"])
    assert cfg["train.beta"] == 0.5 and cfg["train.epochs"] == 3
    assert cfg["eval.horizons"] == (5,)
    assert cfg.training_config().elbo_variant == "mvae"
    assert cfg.training_config("concat").elbo_variant == "concat"
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["train.epochs=two"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["train.beta"])
    with pytest.raises((ConfigError, ValueError)):
        RunConfig.load(None, ["train.beta=-1"])


def test_digest_depends_only_on_selected_keys():
    a = RunConfig.load(None, ["train.beta=0.5"])
    b = RunConfig()
    assert a.digest(a.data_keys()) == b.digest(b.data_keys())
    assert a.digest(a.train_keys()) != b.digest(b.train_keys())


def test_every_default_key_is_settable():
    for key, value in DEFAULTS.items():
        RunConfig({key: value})


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train", "--data", "x"]) == EXIT_USAGE
    assert main(["gen-data", "--out", "x", "--set", "nope=1"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_missing_files_are_runtime_errors(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_train_rejects_mismatched_data(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d")] + sets(TINY)) == EXIT_OK
    # training with the default 16x16 image against 8x8 data
    code = main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--set", "train.epochs=1"])
    assert code == EXIT_RUNTIME


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data")] + sets(TINY)) == EXIT_OK
    for run in ("a", "b"):
        assert main(["train", "--data", str(root / "data"), "--out", str(root / run)] + sets(TINY)) == EXIT_OK
    return root


def test_gen_data_layout(pipeline):
    assert (pipeline / "data" / "train" / "meta.json").exists()
    assert (pipeline / "data" / "val" / "meta.json").exists()
    resolved = json.loads((pipeline / "data" / "config.json").read_text())
    assert resolved["data.n_train"] == 4 and set(resolved) == set(DEFAULTS)


def test_training_is_reproducible(pipeline):
    digest = [hashlib.sha256((pipeline / r / "metrics.jsonl").read_bytes()).hexdigest() for r in ("a", "b")]
    assert digest[0] == digest[1]
    assert (pipeline / "a" / "model.ckpt").read_bytes() == (pipeline / "b" / "model.ckpt").read_bytes()
    resolved = json.loads((pipeline / "a" / "config.json").read_text())
    assert resolved["train.epochs"] == 1


def test_eval_writes_results(pipeline, capsys):
    out = pipeline / "eval"
    assert main(["eval", "--checkpoint", str(pipeline / "a" / "model.ckpt"), "--data", str(pipeline / "data"),
                 "--out", str(out)] + sets(TINY)) == EXIT_OK
    rows = json.loads((out / "results.json").read_text())
    labels = {r["ablation_subset"] for r in rows}
    assert labels == {"accel+ang_vel+image+lin_vel", "accel+ang_vel+lin_vel", "image", "none", "control"}
    assert {r["horizon_s"] for r in rows} == {0.5, 1.0}
    assert (out / "results.csv").exists() and (out / "config.json").exists()


def test_predict_command(pipeline, capsys):
    ck = str(pipeline / "a" / "model.ckpt")
    data = str(pipeline / "data" / "val")
    assert main(["predict", "--checkpoint", ck, "--trajectory", data, "--t", "25", "--horizon", "5"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "translation error" in out and len(out.splitlines()) == 1 + 5 + 3
    assert main(["predict", "--checkpoint", ck, "--trajectory", data, "--t", "25", "--subset", "none"]) == EXIT_OK
    assert main(["predict", "--checkpoint", ck, "--trajectory", data, "--t", "2"]) == EXIT_USAGE
    assert main(["predict", "--checkpoint", ck, "--trajectory", data, "--t", "25", "--index", "9"]) == EXIT_USAGE
