"""Command-line behavior: config precedence, exit codes, output files.

Commands run in-process through main(argv) against small synthetic datasets,
so the suite stays fast while still exercising the full surface.
"""

import json

import numpy as np
import pytest

from densemble.cli import Config, ConfigError, main, parse_config_file
from densemble.dataset import synthetic_interactions, write_interactions
from densemble.model import count_parameters, load_checkpoint


@pytest.fixture()
def data_file(tmp_path):
    matrix = synthetic_interactions(30, 25, 5, density=0.45)
    path = tmp_path / "toy.tsv"
    write_interactions(path, matrix)
    return path


FAST = ["--epochs", "2", "--seeds", "0,1"]


def fast_run(tmp_path, data_file, *argv):
    out = tmp_path / "runs"
    return main([*argv, "--dataset", str(data_file), "--out", str(out), *FAST]), out


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\n"
                   "epochs = 7\n"
                   "seeds = 3, 4\n"
                   "rates = 0.0, 0.5   # trailing comment\n"
                   "aggregator = bma\n"
                   "\n"
                   "split_ratio = 0.7\n")
    values = parse_config_file(cfg)
    assert values == {"epochs": 7, "seeds": (3, 4), "rates": (0.0, 0.5),
                      "aggregator": "bma", "split_ratio": 0.7}


@pytest.mark.parametrize("line", ["epochs 7", "unknown_key = 3", "epochs = soon"])
def test_config_file_rejects_bad_lines(tmp_path, line):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(line + "\n")
    with pytest.raises(ConfigError):
        parse_config_file(cfg)


def test_flag_beats_config_file_beats_default(tmp_path, data_file, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"dataset = {data_file}\nepochs = 1\nseed = 9\n")
    code = main(["train", "--config", str(cfg), "--epochs", "2",
                 "--out", str(tmp_path / "runs")])
    assert code == 0
    assert (tmp_path / "runs" / "model_seed9.ckpt").exists()  # file value used
    assert "trained 2 epochs" in capsys.readouterr().out      # flag wins


def test_missing_dataset_is_a_data_error(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path)])
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_unknown_flag_value_is_a_config_error(tmp_path, data_file, capsys):
    code = main(["train", "--dataset", str(data_file), "--k", "7"])
    assert code == 1
    assert "config error" in capsys.readouterr().err


def test_unreadable_config_file_is_a_config_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "ghost.cfg")]) == 1


def test_unknown_aggregator_is_a_config_error(data_file):
    assert main(["train", "--dataset", str(data_file), "--aggregator", "median"]) == 1


def test_missing_data_file_is_a_data_error(tmp_path, capsys):
    code = main(["train", "--dataset", str(tmp_path / "nope.tsv")])
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_train_writes_checkpoint_log_and_metrics(tmp_path, data_file, capsys):
    code, out = fast_run(tmp_path, data_file, "train")
    assert code == 0
    assert (out / "model_seed0.ckpt").exists()
    assert (out / "train_seed0.csv").read_text().startswith("epoch,recon_loss")
    doc = json.loads((out / "metrics_seed0.json").read_text())
    assert doc["dataset"] == "toy" and doc["model"] == "gate" and doc["k"] == 2
    assert "recall@5" in doc and doc["users_evaluated"] > 0


def test_train_is_deterministic_across_invocations(tmp_path, data_file):
    _, out_a = fast_run(tmp_path / "a", data_file, "train")
    _, out_b = fast_run(tmp_path / "b", data_file, "train")
    assert (out_a / "metrics_seed0.json").read_bytes() == \
        (out_b / "metrics_seed0.json").read_bytes()
    assert (out_a / "model_seed0.ckpt").read_bytes() == \
        (out_b / "model_seed0.ckpt").read_bytes()


def test_evaluate_round_trips_train_metrics(tmp_path, data_file):
    code, out = fast_run(tmp_path, data_file, "train")
    assert code == 0
    code2, out2 = fast_run(tmp_path, data_file, "evaluate",
                           "--checkpoint", str(out / "model_seed0.ckpt"))
    assert code2 == 0
    trained = json.loads((out / "metrics_seed0.json").read_text())
    rescored = json.loads((out2 / "metrics_gate_seed0.json").read_text())
    for key in ("recall@5", "recall@20", "mrr@5", "precision@20"):
        assert rescored[key] == trained[key]


@pytest.mark.parametrize("aggregator", ["mild", "moderate", "strong", "average"])
def test_evaluate_supports_expert_aggregators(tmp_path, data_file, aggregator):
    _, out = fast_run(tmp_path, data_file, "train")
    code, out2 = fast_run(tmp_path, data_file, "evaluate",
                          "--checkpoint", str(out / "model_seed0.ckpt"),
                          "--aggregator", aggregator)
    assert code == 0
    assert (out2 / f"metrics_{aggregator}_seed0.json").exists()


def test_evaluate_rejects_mismatched_checkpoint(tmp_path, data_file, capsys):
    _, out = fast_run(tmp_path, data_file, "train")
    other = synthetic_interactions(12, 9, 6, density=0.5)
    other_path = tmp_path / "other.tsv"
    write_interactions(other_path, other)
    code = main(["evaluate", "--checkpoint", str(out / "model_seed0.ckpt"),
                 "--dataset", str(other_path), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_evaluate_rejects_corrupt_checkpoint(tmp_path, data_file, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    code = main(["evaluate", "--checkpoint", str(bad),
                 "--dataset", str(data_file), "--out", str(tmp_path / "x")])
    assert code == 2


def test_sweep_k_writes_per_k_rows(tmp_path, data_file):
    code, out = fast_run(tmp_path, data_file, "sweep-k")
    assert code == 0
    lines = (out / "sweep_k.csv").read_text().splitlines()
    assert lines[0] == "k,metric,mean,std"
    ks = {line.split(",")[0] for line in lines[1:]}
    assert ks == {"1", "2", "3"}
    metrics = {line.split(",")[1] for line in lines[1:]}
    assert "recall@5" in metrics and "mrr@20" in metrics


def test_ablate_noise_covers_rates_and_rankers(tmp_path, data_file):
    code, out = fast_run(tmp_path, data_file, "ablate-noise", "--rates", "0,0.5")
    assert code == 0
    lines = (out / "ablate_noise.csv").read_text().splitlines()
    assert lines[0] == "rate,ranker,metric,mean"
    cells = [line.split(",") for line in lines[1:]]
    assert {c[0] for c in cells} == {"0.0", "0.5"}
    assert {c[1] for c in cells} == {"mild", "moderate", "strong", "average"}


def test_ablate_noise_rate_zero_matches_plain_evaluation(tmp_path, data_file):
    # Injecting nothing leaves the split untouched, so rate-0 rows must equal
    # a plain train + evaluate of the same seed through the other commands.
    out = tmp_path / "runs"
    code = main(["ablate-noise", "--dataset", str(data_file), "--out", str(out),
                 "--epochs", "2", "--rates", "0", "--seeds", "0"])
    assert code == 0
    rows = {}
    for line in (out / "ablate_noise.csv").read_text().splitlines()[1:]:
        _, ranker, metric, mean = line.split(",")
        rows[(ranker, metric)] = float(mean)
    assert fast_run(tmp_path, data_file, "train")[0] == 0
    for ranker in ("mild", "strong", "average"):
        code2, _ = fast_run(tmp_path, data_file, "evaluate",
                            "--checkpoint", str(out / "model_seed0.ckpt"),
                            "--aggregator", ranker)
        assert code2 == 0
        doc = json.loads((out / f"metrics_{ranker}_seed0.json").read_text())
        for metric in ("recall@5", "recall@20", "mrr@5", "mrr@20",
                       "precision@5", "precision@20"):
            assert doc[metric] == rows[(ranker, metric)]


def test_compare_aggregators_writes_three_kinds(tmp_path, data_file):
    code, out = fast_run(tmp_path, data_file, "compare-aggregators")
    assert code == 0
    lines = (out / "compare_aggregators.csv").read_text().splitlines()
    assert lines[0] == "aggregator,metric,mean,std"
    assert {line.split(",")[0] for line in lines[1:]} == {"gate", "average", "bma"}


def test_count_params_prints_published_total(capsys):
    code = main(["count-params", "--users", "44784", "--items", "1020"])
    assert code == 0
    out = capsys.readouterr().out
    assert "8,695,336" in out
    expected = count_parameters(943, 1682, (128, 48, 12))
    code2 = main(["count-params", "--users", "943", "--items", "1682"])
    assert code2 == 0
    assert f"{expected:,}" in capsys.readouterr().out


def test_count_params_respects_custom_dims(capsys):
    code = main(["count-params", "--users", "10", "--items", "20", "--dims", "6,4,2"])
    assert code == 0
    assert f"{count_parameters(10, 20, (6, 4, 2)):,}" in capsys.readouterr().out


def test_count_params_rejects_bad_dims(capsys):
    assert main(["count-params", "--users", "10", "--items", "20",
                 "--dims", "0,4,2"]) == 1
    assert main(["count-params", "--users", "0", "--items", "20"]) == 1


def test_divergent_training_maps_to_exit_3(tmp_path, data_file, capsys):
    with np.errstate(all="ignore"):
        code = main(["train", "--dataset", str(data_file),
                     "--out", str(tmp_path / "runs"), "--epochs", "3",
                     "--config", str(_diverging_config(tmp_path))])
    assert code == 3
    assert "numeric error" in capsys.readouterr().err


def _diverging_config(tmp_path):
    cfg = tmp_path / "diverge.cfg"
    cfg.write_text("learning_rate = 1e160\nbatch_size = 64\n")
    return cfg


def test_default_config_matches_training_defaults():
    from densemble.training import TrainConfig
    cfg = Config()
    tc = TrainConfig()
    assert cfg.learning_rate == tc.learning_rate
    assert cfg.epochs == tc.epochs
    assert cfg.l2_lambda == tc.l2_lambda
    assert cfg.corruption_prob == tc.corruption_prob
    assert cfg.early_stop_patience == tc.early_stop_patience
    assert cfg.w_importance == tc.w_importance and cfg.w_load == tc.w_load
    assert cfg.pretrain_epochs == tc.pretrain_epochs
    assert (cfg.restart_every or None) == tc.restart_every  # 0 means off


def test_checkpoint_records_k(tmp_path, data_file):
    code, out = fast_run(tmp_path, data_file, "train", "--k", "1")
    assert code == 0
    _, gating = load_checkpoint(out / "model_seed0.ckpt")
    assert gating is not None and gating.k == 1
