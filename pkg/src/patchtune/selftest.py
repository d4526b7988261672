"""Oracle and invariant checks, shared by ``patchtune selftest`` and the test suite.

Every ``check_*`` function returns a :class:`CheckResult`. None of them raise
on a failed comparison; they report the worst observed deviation instead.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError
from .losses import (cross_entropy, frontdoor_ce, kl_to_standard_normal, rare_loss, supcon_loss,
                     total_loss)
from .matching import euclidean_costs, optimal_assignment
from .nets import FrontDoorHead, front_door_forward
from .oracles import (GRAD_RTOL, brute_force_assignment, gradcheck, kl_direct, module_gradcheck,
                      rare_direct, supcon_direct)
from .queues import IMAGE, PATCH, ClassQueue, enqueue
from .tensor import Tensor

CLOSED_FORM_ATOL = 1e-10
NORM_ATOL = 1e-10


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - start)


# gradients

def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def loss_gradient_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random small instance per differentiable loss: ``name -> (build, inputs)``.

    Contrastive queries enter unnormalised, so the normalisation used in
    training is part of what is differentiated.
    """
    k, b = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    tau = float(rng.uniform(0.07, 1.0))
    labels = rng.integers(0, k, size=b)
    d = int(rng.integers(2, 6))
    R = int(rng.integers(2, 5))
    pos = _unit_rows(rng.normal(size=(int(rng.integers(1, 4)), d)))
    neg = _unit_rows(rng.normal(size=(int(rng.integers(1, 4)), d)))
    pos_b = _unit_rows(rng.normal(size=(int(rng.integers(1, 3)), R, d)))
    neg_b = _unit_rows(rng.normal(size=(int(rng.integers(1, 4)), R, d)))
    u = lambda *s: rng.uniform(-2.0, 2.0, size=s)  # noqa: E731

    cases = {
        "cross_entropy": (lambda x: cross_entropy(x[0], labels), [u(b, k)]),
        "supcon_loss": (lambda x: supcon_loss(T.reshape(T.l2_normalize_rows(T.reshape(x[0], (1, d))),
                                                        (d,)), pos, neg, tau), [u(d)]),
        "supcon_loss_all": (lambda x: supcon_loss(T.reshape(T.l2_normalize_rows(T.reshape(x[0], (1, d))),
                                                            (d,)), pos, neg, tau, "all"), [u(d)]),
        "rare_loss": (lambda x: rare_loss(x[0], pos_b, neg_b, tau), [u(R, d)]),
        "rare_loss_all": (lambda x: rare_loss(x[0], pos_b, neg_b, tau, "all"), [u(R, d)]),
        "frontdoor_ce": (lambda x: frontdoor_ce(T.softmax_rows(x[0]), labels), [u(b, k)]),
        "kl_to_standard_normal": (
            lambda x: kl_to_standard_normal(x[0], T.exp(T.scalar_mul(x[1], 0.5))), [u(b, d), u(b, d)]),
    }

    def total(x):
        parts = {"l_ce": cross_entropy(x[0], labels),
                 "l_con": supcon_loss(T.reshape(T.l2_normalize_rows(T.reshape(x[1], (1, d))), (d,)),
                                      pos, neg, tau),
                 "l_r": rare_loss(x[2], pos_b, neg_b, tau),
                 "l_s_ce": frontdoor_ce(T.softmax_rows(x[0]), labels),
                 "l_s_kl": kl_to_standard_normal(x[3], T.exp(T.scalar_mul(x[4], 0.5)))}
        return total_loss(parts, float(rng_alpha), float(rng_beta)).tensor

    rng_alpha, rng_beta = rng.uniform(0.0, 2.0), rng.uniform(0.0, 0.1)
    cases["total_loss"] = (total, [u(b, k), u(d), u(R, d), u(b, d), u(b, d)])
    return cases


def front_door_gradient_case(rng: np.random.Generator):
    """A small random front-door head, feature map and loss; returns ``(params, loss)``."""
    c, n, d_z, k = 8, int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 4))
    phi_input = "z" if rng.random() < 0.5 else "z_and_aggregate"
    head = FrontDoorHead(c, d_z, k, rng, hidden=8, phi_input=phi_input)
    fmap = Tensor(rng.uniform(0.0, 2.0, size=(int(rng.integers(1, 3)), c, n)), requires_grad=True)
    noise = rng.normal(size=(fmap.shape[0], d_z))
    labels = rng.integers(0, k, size=fmap.shape[0])

    def loss():
        out = front_door_forward(head, fmap, "train", noise)
        return frontdoor_ce(out.probabilities, labels) + kl_to_standard_normal(out.mu, out.sigma)

    return head.parameters() + [fmap], loss


def check_gradients(seed: int = 0, instances: int = 50) -> CheckResult:
    """Reverse-mode against central differences for every loss and the front-door head."""

    def run():
        rng = np.random.default_rng([seed, 101])
        worst: dict[str, float] = {}
        for _ in range(instances):
            for name, (build, inputs) in loss_gradient_cases(rng).items():
                worst[name] = max(worst.get(name, 0.0), gradcheck(build, inputs))
            params, loss = front_door_gradient_case(rng)
            worst["front_door_head"] = max(worst.get("front_door_head", 0.0),
                                           module_gradcheck(params, loss))
        bad = {k: v for k, v in worst.items() if not v <= GRAD_RTOL}
        top = max(worst, key=worst.get)
        detail = f"{len(worst)} targets x {instances} instances, worst {top} {worst[top]:.2e}"
        if bad:
            detail += f"; over {GRAD_RTOL:g}: {sorted(bad)}"
        return not bad, detail

    return _timed("gradient fidelity", run)


# assignment

def check_assignment(seed: int = 0, instances: int = 200, sizes=range(2, 7), d: int = 8) -> CheckResult:
    """Hungarian solver against exhaustive enumeration, mapping and cost exactly."""

    def run():
        rng = np.random.default_rng([seed, 102])
        mismatches = 0
        for R in sizes:
            for _ in range(instances):
                q, k = rng.normal(size=(R, d)), rng.normal(size=(R, d))
                got = optimal_assignment(q, k)
                mapping, cost = brute_force_assignment(euclidean_costs(q, k))
                if got.mapping != mapping or got.total_cost != cost:
                    mismatches += 1
        total = instances * len(list(sizes))
        return mismatches == 0, f"{total - mismatches}/{total} instances exact (R in {list(sizes)})"

    return _timed("assignment exactness", run)


# closed forms

def _e(i: int, d: int = 4) -> np.ndarray:
    v = np.zeros(d)
    v[i] = 1.0
    return v


def closed_form_cases(seed: int = 0) -> list[tuple[str, Callable[[], float], float]]:
    """``(name, compute, expected)`` for every hand-derivable loss value."""
    e0, e1, e2, e3 = (_e(i) for i in range(4))
    q_block = np.stack([e0, e1])
    orth_block = np.stack([e2, e3])
    rng = np.random.default_rng([seed, 103])
    rq = rng.normal(size=(3, 5))
    rpos = [rng.normal(size=(3, 5))]
    rneg = [rng.normal(size=(3, 5)) for _ in range(2)]
    rneg_unit = [_unit_rows(b) for b in rneg]
    sup_q = _unit_rows(rng.normal(size=4))
    sup_pos = list(_unit_rows(rng.normal(size=(3, 4))))
    sup_neg = list(_unit_rows(rng.normal(size=(5, 4))))
    val = lambda t: float(t.data)  # noqa: E731
    p_tiny = np.array([1e-15, 1.0 - 1e-15, 0.0, 0.0])
    return [
        ("supcon q.k+=0, q.k-=0", lambda: val(supcon_loss(Tensor(e0), [e1], [e2], 1.0)), 0.0),
        ("supcon q.k+=1, q.k-=0", lambda: val(supcon_loss(Tensor(e0), [e0], [e2], 1.0)), -1.0),
        ("supcon positives {1, 0}", lambda: val(supcon_loss(Tensor(e0), [e0, e1], [e2], 1.0)), -0.5),
        ("supcon random vs direct", lambda: val(supcon_loss(Tensor(sup_q), sup_pos, sup_neg, 0.07)),
         supcon_direct(sup_q, sup_pos, sup_neg, 0.07)),
        ("rare identical positive, orthogonal negative",
         lambda: val(rare_loss(Tensor(q_block), [q_block], [orth_block], 1.0)), -1.0),
        ("rare identical positive and negative",
         lambda: val(rare_loss(Tensor(q_block), [q_block], [q_block], 1.0)), 0.0),
        ("rare orthogonal negative in shuffled order",
         lambda: val(rare_loss(Tensor(q_block), [q_block[::-1]], [orth_block[::-1]], 1.0)), -1.0),
        ("rare R=3 brute force", lambda: val(rare_loss(Tensor(rq), rpos, rneg_unit, 0.5)),
         rare_direct(rq, rpos, rneg_unit, 0.5)),
        ("frontdoor_ce one-hot", lambda: val(frontdoor_ce(Tensor(e1), 1)), 0.0),
        ("frontdoor_ce uniform over 4", lambda: val(frontdoor_ce(Tensor(np.full(4, 0.25)), 2)), math.log(4.0)),
        ("frontdoor_ce clamp", lambda: val(frontdoor_ce(Tensor(p_tiny), 0)), -math.log(1e-12)),
        ("kl mu=0 sigma=1", lambda: val(kl_to_standard_normal(Tensor(np.zeros(5)), Tensor(np.ones(5)))), 0.0),
        ("kl mu=3 sigma=1", lambda: val(kl_to_standard_normal(Tensor([3.0]), Tensor([1.0]))), 4.5),
        ("kl mu=0 sigma=e", lambda: val(kl_to_standard_normal(Tensor([0.0]), Tensor([math.e]))),
         0.5 * (math.e ** 2 - 3.0)),
        ("kl random vs direct", lambda: val(kl_to_standard_normal(Tensor(rq[0]), Tensor(np.exp(rq[1])))),
         kl_direct(rq[0], np.exp(rq[1]))),
        ("total all ones", lambda: total_loss({t: 1.0 for t in ("l_ce", "l_con", "l_r", "l_s_ce", "l_s_kl")},
                                              1.0, 5e-3).total, 3.01),
        ("total alpha=beta=0", lambda: total_loss({"l_ce": 0.7, "l_con": -0.2, "l_r": 5.0, "l_s_ce": 3.0,
                                                   "l_s_kl": 9.0}, 0.0, 0.0).total, 0.5),
        ("total without l_r", lambda: total_loss({"l_ce": 1.0, "l_con": 1.0, "l_s_ce": 1.0, "l_s_kl": 1.0},
                                                 1.0, 5e-3).total, 2.01),
    ]


def check_closed_forms(seed: int = 0) -> CheckResult:
    def run():
        errs = [(name, abs(fn() - want)) for name, fn, want in closed_form_cases(seed)]
        bad = [n for n, e in errs if not e <= CLOSED_FORM_ATOL]
        worst = max(e for _, e in errs)
        detail = f"{len(errs)} cases, worst |error| {worst:.1e}"
        return not bad, detail + (f"; failed: {bad}" if bad else "")

    return _timed("closed-form spot checks", run)


# normalisation

def _row_dev(x: np.ndarray) -> float:
    return float(np.abs(x.sum(axis=-1) - 1.0).max())


def check_normalization(seed: int = 0, probes: int = 1000) -> CheckResult:
    """Attention rows, front-door probabilities and queued keys across random probes."""

    def run():
        rng = np.random.default_rng([seed, 104])
        worst = {"P": 0.0, "S": 0.0, "probabilities": 0.0, "queue keys": 0.0, "negative": 0.0}
        for _ in range(probes):
            c = int(rng.choice([8, 16]))
            n = int(rng.integers(1, 37))
            b = int(rng.integers(1, 4))
            scale = float(10.0 ** rng.uniform(-2, 1))
            head = FrontDoorHead(c, int(rng.integers(1, 9)), int(rng.integers(2, 6)), rng,
                                 phi_input="z" if rng.random() < 0.5 else "z_and_aggregate")
            fmap = Tensor(rng.uniform(0.0, scale, size=(b, c, n)))
            with T.no_grad():
                for mode in ("train", "eval"):
                    noise = rng.normal(size=(b, head.d_z)) if mode == "train" else None
                    out = front_door_forward(head, fmap, mode, noise)
                    worst["P"] = max(worst["P"], _row_dev(out.patch_attention.data))
                    worst["S"] = max(worst["S"], _row_dev(out.channel_attention.data))
                    worst["probabilities"] = max(worst["probabilities"], _row_dev(out.probabilities.data))
                    mins = min(out.patch_attention.data.min(), out.channel_attention.data.min(),
                               out.probabilities.data.min())
                    worst["negative"] = max(worst["negative"], -float(mins))
            kind = IMAGE if rng.random() < 0.5 else PATCH
            shape = (int(rng.integers(2, 40)),) if kind == IMAGE else (int(rng.integers(1, 10)), c)
            queue = ClassQueue(0, int(rng.integers(1, 5)), kind)
            for step in range(int(rng.integers(1, 8))):
                raw = rng.normal(size=shape) * 10.0 ** rng.uniform(-6, 6)
                enqueue(queue, raw / np.linalg.norm(raw, axis=-1, keepdims=True), step)
            for key in queue.keys():
                worst["queue keys"] = max(worst["queue keys"],
                                          float(np.abs(np.linalg.norm(key, axis=-1) - 1.0).max()))
        bad = [k for k, v in worst.items() if not v <= NORM_ATOL]
        detail = f"{probes} probes, " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        return not bad, detail

    return _timed("normalisation invariants", run)


# training-loop contracts

def check_ema_replay(cfg, checkpoint, train) -> CheckResult:
    """Replay the EMA recurrence off-line along the query trajectory and compare bit-exactly."""
    from .harness.train import build_finetune_model, finetune

    def run():
        init = build_finetune_model(cfg, checkpoint, cfg.bench.downstream_classes)
        replay = {name: t.data.copy() for name, t in init.named_parameters()}
        m = cfg.ema_momentum
        state = {"steps": 0, "mismatch": 0, "query_moved_by_ema": 0}

        def hook(step, pair, _bd):
            for name, q in pair.query.named_parameters():
                replay[name] = m * replay[name] + (1.0 - m) * q.data
            for name, k in pair.key.named_parameters():
                if not np.array_equal(k.data, replay[name]):
                    state["mismatch"] += 1
            state["steps"] += 1

        finetune(cfg, checkpoint, train, on_step=hook)
        ok = state["steps"] > 0 and state["mismatch"] == 0
        return ok, (f"{state['steps']} steps at m={m}, "
                    f"{state['mismatch']} parameter mismatches")

    return _timed("EMA recurrence replay", run)


NESTING_EXCLUDED = ("l_r", "l_s_ce", "l_s_kl")


def nesting_rows(record) -> list:
    """Metric rows that both sides of the nesting identity must agree on.

    With ``alpha = beta = 0`` the rare and front-door parts are still computed
    and logged, with zero weight, so their own diagnostic rows are excluded.
    """
    return [r for r in record.rows if r[2] not in NESTING_EXCLUDED]


def check_ablation_nesting(cfg, checkpoint, train, test=None, masked=None) -> CheckResult:
    """``lf_only`` against ``full`` with ``alpha = beta = 0``: identical trajectories."""
    from .harness.train import finetune

    def run():
        m_a, rec_a = finetune(cfg.with_updates(method="lf_only"), checkpoint, train, test, masked)
        m_b, rec_b = finetune(cfg.with_updates(method="full", alpha=0.0, beta=0.0),
                              checkpoint, train, test, masked)
        rows_a, rows_b = nesting_rows(rec_a), nesting_rows(rec_b)
        same_rows = rows_a == rows_b and len(rows_a) > 0
        prefix = ("encoder.", "classifier.")
        pa = {n: t.data for n, t in m_a.named_parameters() if n.startswith(prefix)}
        pb = {n: t.data for n, t in m_b.named_parameters() if n.startswith(prefix)}
        same_params = pa.keys() == pb.keys() and all(np.array_equal(pa[n], pb[n]) for n in pa)
        same_totals = [b.total for b in rec_a.history] == [b.total for b in rec_b.history]
        ok = same_rows and same_params and same_totals
        return ok, (f"{len(rows_a)} metric rows identical={same_rows}, "
                    f"per-step totals identical={same_totals}, final weights identical={same_params}")

    return _timed("ablation nesting", run)


def tiny_config(seed: int = 0):
    """A configuration small enough for the training-loop checks to run in seconds."""
    from .harness.config import TrainConfig

    cfg = TrainConfig(seed=seed, pretrain_epochs=1, epochs=1, iters_per_epoch=10, batch_size=16)
    return cfg.with_updates(bench={"n_pretrain": 400, "n_train": 160, "n_test": 160}).validate()


def run_all(seed: int = 0, instances: int = 50, printer=print) -> bool:
    """Run every check at its full size on the tiny configuration; print one line per check."""
    from .harness.train import prepare_seed, pretrain

    results = [check_gradients(seed, instances), check_assignment(seed), check_closed_forms(seed),
               check_normalization(seed)]
    cfg = tiny_config(seed)
    (pre, train, test), masked = prepare_seed(cfg)
    try:
        ckpt = pretrain(cfg, pre)
    except (ContractError, DomainError) as exc:
        results.append(CheckResult("pretrain", False, str(exc)))
    else:
        results.append(check_ema_replay(cfg, ckpt, train))
        results.append(check_ablation_nesting(cfg, ckpt, train, test, masked))
    for r in results:
        printer(r.line())
    return all(r.ok for r in results)
