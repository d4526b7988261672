"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible with ``pytest -v``)
before asserting. The planted-benchmark tests share one methods x seeds matrix.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from patchtune import selftest
from patchtune.harness.cli import main
from patchtune.harness.config import TrainConfig
from patchtune.harness.train import mean_final, prepare_seed, pretrain, run_matrix

ROOT = Path(__file__).resolve().parents[1]
PILOT = ROOT / "calibration" / "pilot.json"
SEEDS = (0, 1, 2, 3, 4)
EFFECT_METHODS = ("vanilla_ft", "lf_only", "lf_lr", "lf_ls", "full")


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")

    return emit


def test_criterion_1_gradient_fidelity(report):
    r = selftest.check_gradients(seed=0, instances=50)
    ok = r.ok and r.seconds < 60
    report(1, "gradient fidelity", ok, f"{r.detail}; {r.seconds:.1f}s (limit 60s)")
    assert ok


def test_criterion_2_assignment_exactness(report):
    r = selftest.check_assignment(seed=0, instances=200, sizes=range(2, 7))
    ok = r.ok and r.seconds < 30
    report(2, "assignment exactness", ok, f"{r.detail}; {r.seconds:.1f}s (limit 30s)")
    assert ok


def test_criterion_3_closed_forms(report):
    r = selftest.check_closed_forms(seed=0)
    report(3, "closed-form spot checks", r.ok, f"{r.detail} (tolerance 1e-10)")
    assert r.ok


def test_criterion_4_normalisation(report):
    r = selftest.check_normalization(seed=0, probes=1000)
    report(4, "normalisation invariants", r.ok, f"{r.detail} (tolerance 1e-10)")
    assert r.ok


@pytest.fixture(scope="module")
def seed0():
    cfg = TrainConfig(seed=0)
    (pre, tr, te), masked = prepare_seed(cfg)
    return cfg, pretrain(cfg, pre), tr, te, masked


def test_criterion_5_ema_replay(report, seed0):
    cfg, ckpt, tr, _, _ = seed0
    run_cfg = cfg.with_updates(method="full", epochs=1, iters_per_epoch=10)
    assert run_cfg.ema_momentum == 0.999
    r = selftest.check_ema_replay(run_cfg, ckpt, tr)
    report(5, "EMA recurrence replay", r.ok, r.detail)
    assert r.ok


def test_criterion_6_ablation_nesting(report, seed0):
    cfg, ckpt, tr, te, masked = seed0
    r = selftest.check_ablation_nesting(cfg, ckpt, tr, te, masked)
    report(6, "ablation nesting", r.ok, f"{r.detail}; default schedule, seed 0")
    assert r.ok


@pytest.fixture(scope="module")
def matrix():
    start = time.perf_counter()
    records = run_matrix(list(EFFECT_METHODS), list(SEEDS), TrainConfig())
    return records, time.perf_counter() - start


def _means(records, attr):
    return {m: mean_final(records, m, attr) for m in EFFECT_METHODS}


def test_criterion_7_planted_effect(report, matrix):
    records, seconds = matrix
    delta = json.loads(PILOT.read_text())["delta"]
    acc = _means(records, "final_test_accuracy")
    margin = acc["full"] - acc["vanilla_ft"]
    checks = {
        "full > lf_only": acc["full"] > acc["lf_only"],
        "full > vanilla_ft": acc["full"] > acc["vanilla_ft"],
        f"full - vanilla_ft >= delta ({delta:.4f})": margin >= delta,
        "lf_lr >= lf_only": acc["lf_lr"] >= acc["lf_only"],
        "lf_ls >= lf_only": acc["lf_ls"] >= acc["lf_only"],
    }
    ok = all(checks.values())
    means = ", ".join(f"{m} {v:.4f}" for m, v in acc.items())
    failed = [k for k, v in checks.items() if not v]
    report(7, "planted negative-transfer effect", ok,
           f"mean test accuracy over seeds {list(SEEDS)}: {means}; margin {margin:+.4f}; "
           f"failed: {failed or 'none'}; matrix {seconds:.0f}s")
    assert ok, failed


def test_criterion_8_rare_feature_probe(report, matrix):
    records, _ = matrix
    acc = _means(records, "final_masked_accuracy")
    ok = acc["full"] > acc["vanilla_ft"]
    report(8, "rare-feature remedy probe", ok,
           f"mean masked accuracy full {acc['full']:.4f} vs vanilla_ft {acc['vanilla_ft']:.4f}")
    assert ok


def test_criterion_9_matrix_determinism(report, tmp_path):
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["matrix", "--seed", "0", "--out", str(out)]) == 0
        outs.append((out / "metrics.csv").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    report(9, "determinism", ok, f"two `matrix` runs (all methods, seed 0): CSV {len(outs[0])} bytes, "
                                 f"identical={outs[0] == outs[1]}")
    assert ok
