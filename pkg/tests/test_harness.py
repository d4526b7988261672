import json
from dataclasses import replace

import numpy as np
import pytest

from patchtune.bench import GlyphBank, audit, generate, load_datasets
from patchtune.errors import ConfigError, ContractError
from patchtune.harness.cli import main
from patchtune.harness.config import METHODS, TrainConfig, apply_overrides, load_config
from patchtune.harness.train import (MetricsRecord, bench_for_seed, build_finetune_model, evaluate, finetune,
                                     oracle_model, prepare_seed, pretrain, records_to_csv, run_matrix)
from patchtune.io import atomic_write_text
from patchtune.nets import Classifier, Encoder, Model
from patchtune.selftest import check_ablation_nesting, check_ema_replay, tiny_config


@pytest.fixture(scope="module")
def tiny():
    cfg = tiny_config(0)
    (pre, tr, te), masked = prepare_seed(cfg)
    return cfg, pre, tr, te, masked, pretrain(cfg, pre)


def _params(model):
    return {n: t.data.copy() for n, t in model.named_parameters()}


def test_zero_pretrain_epochs_returns_initialisation(tiny):
    cfg, pre, *_ = tiny
    model = pretrain(cfg.with_updates(pretrain_epochs=0), pre)
    again = pretrain(cfg.with_updates(pretrain_epochs=0), pre)
    assert all(np.array_equal(a, b) for a, b in zip(_params(model).values(), _params(again).values()))
    fresh = Encoder(cfg.bench.grid, cfg.bench.patch, cfg.d_patch, cfg.channels,
                    np.random.default_rng([cfg.seed, 1]))
    for name, t in fresh.named_parameters("encoder."):
        np.testing.assert_array_equal(model.params[name].data, t.data)


def test_pretrain_improves_accuracy_and_is_reproducible():
    cfg = tiny_config(1).with_updates(pretrain_epochs=3)
    (pre, _, _), _ = prepare_seed(cfg)
    rec_a, rec_b = MetricsRecord("pretrain", 1), MetricsRecord("pretrain", 1)
    a, b = pretrain(cfg, pre, rec_a), pretrain(cfg, pre, rec_b)
    acc = rec_a.series("pretrain", "accuracy")
    assert acc[-1] > acc[0]
    for (n, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes(), n
    assert rec_a.rows == rec_b.rows


def test_vanilla_has_only_cross_entropy(tiny):
    cfg, _, tr, te, masked, ckpt = tiny
    _, rec = finetune(cfg.with_updates(method="vanilla_ft"), ckpt, tr, te, masked)
    assert rec.history
    for bd in rec.history:
        assert bd.l_con == bd.l_r == bd.l_s_ce == bd.l_s_kl == 0.0
        assert bd.total == bd.l_ce


def test_full_reports_every_term_and_consistent_totals(tiny):
    cfg, _, tr, te, masked, ckpt = tiny
    _, rec = finetune(cfg.with_updates(method="full"), ckpt, tr, te, masked)
    for bd in rec.history:
        assert not bd.skipped
        assert bd.recompute(cfg.alpha, cfg.beta) == bd.total


def test_scratch_ignores_checkpoint(tiny):
    cfg, _, tr, *_ = tiny
    scfg = cfg.with_updates(method="scratch")
    a, _ = finetune(scfg, None, tr)
    b, _ = finetune(scfg, tiny[-1], tr)
    assert all(np.array_equal(x, y) for x, y in zip(_params(a).values(), _params(b).values()))


def test_non_scratch_needs_checkpoint(tiny):
    cfg, _, tr, *_ = tiny
    with pytest.raises(ContractError):
        finetune(cfg.with_updates(method="vanilla_ft"), None, tr)


def test_skip_until_warm_queue_mode(tiny):
    cfg, _, tr, te, masked, ckpt = tiny
    _, rec = finetune(cfg.with_updates(method="full", queue_init="skip"), ckpt, tr, te, masked)
    assert {"l_con", "l_r"} <= rec.history[0].skipped
    assert "l_con" not in rec.history[-1].skipped


def test_ema_replay_on_tiny_run(tiny):
    cfg, _, tr, *_ , ckpt = tiny
    assert check_ema_replay(cfg.with_updates(method="full"), ckpt, tr).ok


def test_ablation_nesting_on_tiny_run(tiny):
    cfg, _, tr, te, masked, ckpt = tiny
    assert check_ablation_nesting(cfg, ckpt, tr, te, masked).ok


def test_finetune_is_reproducible(tiny):
    cfg, _, tr, te, masked, ckpt = tiny
    _, a = finetune(cfg.with_updates(method="full"), ckpt, tr, te, masked)
    _, b = finetune(cfg.with_updates(method="full"), ckpt, tr, te, masked)
    assert a.rows == b.rows


def test_evaluate_oracle_is_perfect():
    cfg = TrainConfig().with_updates(bench={"n_pretrain": 10, "n_train": 10, "n_test": 400})
    bench = bench_for_seed(cfg)
    _, _, te = generate(bench)
    model = oracle_model(cfg, GlyphBank.build(bench))
    assert evaluate(model, te.images, te.labels) == 1.0


def test_random_classifier_is_near_chance():
    cfg = TrainConfig()
    _, _, te = generate(bench_for_seed(cfg))
    model = build_finetune_model(cfg.with_updates(method="scratch"), None, 4)
    acc = evaluate(model, te.images, te.labels)
    sigma = np.sqrt(0.25 * 0.75 / len(te))
    assert abs(acc - 0.25) <= 5 * sigma
    assert evaluate(model, te.images, te.labels) == acc


def test_evaluate_rejects_empty(tiny):
    cfg, *_ , ckpt = tiny
    with pytest.raises(ContractError):
        evaluate(ckpt, np.zeros((0, 30, 30)), np.zeros(0))


def test_front_door_eval_head(tiny):
    cfg, _, tr, te, masked, ckpt = tiny
    _, rec = finetune(cfg.with_updates(method="lf_ls", eval_head="frontdoor"), ckpt, tr, te, masked)
    assert 0.0 <= rec.final_test_accuracy <= 1.0


def test_run_matrix_single_cell_and_csv_determinism(tmp_path):
    cfg = tiny_config(2)
    recs = run_matrix(["vanilla_ft"], [2], cfg, tmp_path / "a")
    assert [r.method for r in recs if r.method != "pretrain"] == ["vanilla_ft"]
    run_matrix(["vanilla_ft"], [2], cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "method,seed,epoch,split,metric,value"


def test_run_matrix_needs_cells():
    with pytest.raises(ContractError):
        run_matrix([], [0], tiny_config())


def test_csv_values_round_trip():
    rec = MetricsRecord("full", 0)
    rec.add(1, "test", "accuracy", 0.1 + 0.2)
    row = records_to_csv([rec]).splitlines()[1].split(",")
    assert float(row[-1]) == 0.1 + 0.2


def test_config_json_round_trip(tmp_path):
    cfg = TrainConfig(alpha=0.5, method="lf_lr").with_updates(bench={"rare_rate": 0.03})
    path = atomic_write_text(tmp_path / "c.json", json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg


@pytest.mark.parametrize("bad", [dict(method="bogus"), dict(alpha=-1.0), dict(channels=12), dict(tau=0.0),
                                 dict(ema_momentum=1.0), dict(R=40)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_overrides():
    cfg = apply_overrides(TrainConfig(), ["beta=0.01", "bench.n_test=40", "denominator=all"])
    assert cfg.beta == 0.01 and cfg.bench.n_test == 40 and cfg.denominator == "all"
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), ["nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), ["bench.nope=1"])


def test_methods_enumerated():
    assert METHODS == ("scratch", "vanilla_ft", "lf_only", "lf_lr", "lf_ls", "full")


SMALL_SET = ["--set", "pretrain_epochs=1", "--set", "epochs=1", "--set", "iters_per_epoch=3",
             "--set", "bench.n_pretrain=200", "--set", "bench.n_train=64", "--set", "bench.n_test=64"]


def test_cli_gen_audit_pretrain_finetune(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), *SMALL_SET]) == 0
    data = tmp_path / "datasets.npz"
    splits, bench = load_datasets(data)
    assert len(splits[1]) == 64
    assert main(["audit", "--data", str(data), "--out", str(tmp_path)]) in (0, 1)
    report = json.loads((tmp_path / "audit.json").read_text())
    assert report == json.loads(json.dumps(audit(splits, bench)))
    assert main(["pretrain", "--data", str(data), "--out", str(tmp_path), *SMALL_SET]) == 0
    assert main(["finetune", "--data", str(data), "--checkpoint", str(tmp_path / "pretrain.npz"),
                 "--method", "full", "--out", str(tmp_path), *SMALL_SET]) == 0
    assert (tmp_path / "full.npz").exists() and (tmp_path / "full_metrics.csv").exists()


def test_cli_matrix_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["matrix", "--methods", "vanilla_ft,lf_only", "--seeds", "0",
                     "--out", str(tmp_path / name), *SMALL_SET]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_cli_config_file_and_errors(tmp_path, capsys):
    cfg = TrainConfig(pretrain_epochs=1, epochs=1, iters_per_epoch=2)
    path = atomic_write_text(tmp_path / "c.json", json.dumps(cfg.to_dict()))
    assert main(["gen", "--config", str(path), "--out", str(tmp_path / "g"), "--set", "bench.n_pretrain=20",
                 "--set", "bench.n_train=8", "--set", "bench.n_test=8"]) == 0
    assert main(["gen", "--out", str(tmp_path), "--set", "bench.rare_rate=0.5"]) == 2
    assert "error:" in capsys.readouterr().err
