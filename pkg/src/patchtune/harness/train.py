"""Pre-training, fine-tuning under each method variant, evaluation, and the matrix runner."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import tensor as T
from ..bench import GlyphBank, PlantedConfig, PlantedSplit, generate, mask_non_rare
from ..errors import ContractError, DomainError, NotWarm, NumericalError, RunError
from ..losses import (LossBreakdown, cross_entropy, frontdoor_ce, kl_to_standard_normal,
                      rare_loss_batch, supcon_loss_batch, total_loss)
from ..nets import (Classifier, Encoder, FrontDoorHead, Model, ModelPair, classify, ema_update,
                    encode, front_door_forward, load_into, select_rare_patches, to_cells)
from ..queues import IMAGE, PATCH, QueueGroup, enqueue, sample_positive_negative
from ..io import atomic_write_text
from .config import TrainConfig

log = logging.getLogger(__name__)

_STREAMS = {
    "init_encoder": 1, "init_pretrain_classifier": 2, "pretrain_batches": 3,
    "init_classifier": 11, "init_head": 12, "batches": 13, "image_queue_init": 14,
    "patch_queue_init": 15, "image_sampling": 16, "patch_sampling": 17, "z_noise": 18,
}

CSV_COLUMNS = ("method", "seed", "epoch", "split", "metric", "value")
EVAL_CHUNK = 400


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per purpose, so methods never perturb each other's draws."""
    return np.random.default_rng([seed, _STREAMS[name]])


def bench_for_seed(cfg: TrainConfig) -> PlantedConfig:
    return replace(cfg.bench, seed=cfg.bench.seed + cfg.seed)


@dataclass
class MetricsRecord:
    method: str
    seed: int
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)
    history: list[LossBreakdown] = field(default_factory=list, repr=False)
    final_test_accuracy: float = float("nan")
    final_masked_accuracy: float = float("nan")
    wall_clock: float = 0.0

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((int(epoch), split, metric, float(value)))

    def series(self, split: str, metric: str) -> list[float]:
        return [v for _, s, m, v in self.rows if s == split and m == metric]

    def summary(self) -> dict:
        return {"method": self.method, "seed": self.seed,
                "final_test_accuracy": self.final_test_accuracy,
                "final_masked_accuracy": self.final_masked_accuracy,
                "wall_clock": self.wall_clock}


def new_encoder(cfg: TrainConfig, rng: np.random.Generator) -> Encoder:
    return Encoder(cfg.bench.grid, cfg.bench.patch, cfg.d_patch, cfg.channels, rng)


def _batches(n: int, batch: int, iters: int | None, rng: np.random.Generator):
    iters = iters or math.ceil(n / batch)
    perm = rng.permutation(n)
    for i in range(iters):
        yield perm[np.arange(i * batch, (i + 1) * batch) % n]


def _predict(model: Model, cells: np.ndarray, head: str = "classifier") -> np.ndarray:
    preds = []
    with T.no_grad():
        for s in range(0, len(cells), EVAL_CHUNK):
            fmap = encode(model.encoder, cells[s:s + EVAL_CHUNK])
            if head == "frontdoor":
                if model.head is None:
                    raise ContractError("evaluate: model has no front-door head")
                scores = front_door_forward(model.head, fmap, mode="eval").probabilities.data
            else:
                scores = classify(model.classifier, fmap).data
            preds.append(np.argmax(scores, axis=1))
    return np.concatenate(preds)


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, head: str = "classifier") -> float:
    """Top-1 accuracy of ``model`` on pixel images or pre-split cells."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("evaluate: empty test set")
    cells = _cells_of(model.encoder, images)
    if len(cells) != len(labels):
        raise ContractError(f"evaluate: {len(cells)} images vs {len(labels)} labels")
    return float((_predict(model, cells, head) == labels).mean())


def _cells_of(encoder: Encoder, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    side = encoder.grid * encoder.patch
    if images.shape[-2:] == (side, side):
        return to_cells(images, encoder.grid, encoder.patch)
    return images


def _finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise RunError(f"{what} diverged (non-finite loss) at step {step}")


def pretrain(cfg: TrainConfig, data: PlantedSplit, record: MetricsRecord | None = None) -> Model:
    """Train encoder and a pre-training classifier with cross-entropy."""
    if len(data) == 0:
        raise ContractError("pretrain: empty dataset")
    encoder = new_encoder(cfg, stream(cfg.seed, "init_encoder"))
    n_classes = int(data.labels.max()) + 1
    classifier = Classifier(cfg.channels, max(n_classes, cfg.bench.pretrain_classes),
                            stream(cfg.seed, "init_pretrain_classifier"))
    model = Model(encoder, classifier)
    cells = to_cells(data.images, cfg.bench.grid, cfg.bench.patch)
    rng = stream(cfg.seed, "pretrain_batches")
    if record is not None:
        record.add(0, "pretrain", "accuracy", evaluate(model, cells, data.labels))
    step = 0
    for epoch in range(1, cfg.pretrain_epochs + 1):
        losses = []
        for idx in _batches(len(data), cfg.batch_size, None, rng):
            loss = cross_entropy(classify(classifier, encode(encoder, cells[idx])), data.labels[idx])
            _finite(float(loss.data), "pretrain", step)
            T.backward(loss)
            T.sgd_step(model.parameters(), cfg.pretrain_lr, cfg.sgd_momentum)
            losses.append(float(loss.data))
            step += 1
        if record is not None:
            record.add(epoch, "pretrain", "l_ce", float(np.mean(losses)))
            record.add(epoch, "pretrain", "accuracy", evaluate(model, cells, data.labels))
        log.info("pretrain seed=%d epoch=%d loss=%.4f", cfg.seed, epoch, np.mean(losses))
    for t in model.parameters():
        t.velocity = None
    return model


@dataclass
class _Queues:
    image: QueueGroup
    patch: QueueGroup


def _init_queues(cfg: TrainConfig, n_classes: int) -> _Queues:
    q = _Queues(QueueGroup(n_classes, cfg.queue_capacity, IMAGE),
                QueueGroup(n_classes, cfg.queue_capacity, PATCH))
    if cfg.queue_init == "random":
        q.image.seed_random(stream(cfg.seed, "image_queue_init"), (n_classes,))
        q.patch.seed_random(stream(cfg.seed, "patch_queue_init"), (cfg.R, cfg.channels))
    return q


def build_finetune_model(cfg: TrainConfig, checkpoint: Model | dict | None, n_classes: int) -> Model:
    encoder = new_encoder(cfg, stream(cfg.seed, "init_encoder"))
    if cfg.method != "scratch":
        if checkpoint is None:
            raise ContractError(f"method {cfg.method} needs a pre-trained checkpoint")
        arrays = checkpoint if isinstance(checkpoint, dict) else {
            n: t.data for n, t in checkpoint.named_parameters()}
        load_into(Model(encoder, Classifier(cfg.channels, 2, np.random.default_rng(0))),
                  arrays, prefix="encoder.")
    classifier = Classifier(cfg.channels, n_classes, stream(cfg.seed, "init_classifier"))
    head = FrontDoorHead(cfg.channels, cfg.d_z, n_classes, stream(cfg.seed, "init_head"),
                         phi_input=cfg.phi_input, channel_attention=cfg.channel_attention)
    return Model(encoder, classifier, head)


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalised rows and a mask of rows that were non-zero."""
    norms = np.linalg.norm(x, axis=-1)
    ok = norms >= T.NORM_EPS
    while ok.ndim > 1:
        ok = ok.all(axis=-1)
    safe = np.where(norms[..., None] >= T.NORM_EPS, norms[..., None], 1.0)
    return x / safe, ok


def _rare_positions(fmap: np.ndarray, logits: np.ndarray, labels: np.ndarray,
                    weight: np.ndarray, R: int) -> np.ndarray:
    return np.array([select_rare_patches(fmap[i], logits[i], int(labels[i]), weight, R)
                     for i in range(len(labels))], dtype=np.intp)


def _picked_cells(cells: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return np.take_along_axis(cells, positions[..., None], axis=1)


def _enqueue_keys(cfg: TrainConfig, pair: ModelPair, queues: _Queues, cells: np.ndarray,
                  labels: np.ndarray, step: int) -> None:
    use_con, use_r, _ = cfg.terms
    key = pair.key
    with T.no_grad():
        fmap = encode(key.encoder, cells)
        logits = classify(key.classifier, fmap).data
        if use_con:
            keys, ok = _unit_rows(logits)
            for i in range(len(labels)):
                if ok[i]:
                    enqueue(queues.image[int(labels[i])], keys[i], step)
        if use_r:
            pos = _rare_positions(fmap.data, logits, labels, key.classifier.weight.data, cfg.R)
            raw = key.encoder.encode_cells(_picked_cells(cells, pos)).data
            blocks, ok = _unit_rows(raw)
            for i in range(len(labels)):
                if ok[i]:
                    enqueue(queues.patch[int(labels[i])], blocks[i], step)


def _grouped_mean(query: T.Tensor, samples: list, loss_fn) -> T.Tensor | None:
    """Mean over samples of ``loss_fn`` evaluated in batches of equal key counts.

    ``samples`` holds ``(row, positives, negatives)``; rows index ``query``.
    """
    if not samples:
        return None
    groups: dict = {}
    for row, pos, neg in samples:
        groups.setdefault((len(pos), len(neg)), []).append((row, pos, neg))
    per_sample = []
    for members in groups.values():
        rows = [m[0] for m in members]
        q = T.gather_rows(query, rows) if len(rows) < query.shape[0] else query
        pos = np.stack([m[1] for m in members])
        neg = np.stack([m[2] for m in members])
        per_sample.append(loss_fn(q, pos, neg))
    joined = per_sample[0] if len(per_sample) == 1 else T.concat_axis(per_sample, axis=0)
    return T.mean_pool_axis(joined)


def _draw(queues: QueueGroup, labels, rows, cfg, rng) -> list:
    samples = []
    for row, i in enumerate(rows):
        try:
            pos, neg = sample_positive_negative(queues, int(labels[i]), cfg.k_plus, cfg.k_minus, rng)
        except NotWarm:
            continue
        samples.append((row, pos, neg))
    return samples


def _contrastive_term(cfg, logits, labels, queues: QueueGroup, rng) -> T.Tensor | None:
    norms = np.linalg.norm(logits.data, axis=1)
    valid = np.flatnonzero(norms >= T.NORM_EPS)
    if valid.size == 0:
        return None
    q = T.l2_normalize_rows(T.gather_rows(logits, valid) if valid.size < len(labels) else logits)
    return _grouped_mean(q, _draw(queues, labels, valid, cfg, rng),
                         lambda qq, p, n: supcon_loss_batch(qq, p, n, cfg.tau, cfg.denominator))


def _rare_term(cfg, model: Model, cells, fmap, logits, labels, queues: QueueGroup, rng) -> T.Tensor | None:
    pos_idx = _rare_positions(fmap.data, logits.data, labels, model.classifier.weight.data, cfg.R)
    raw = model.encoder.encode_cells(_picked_cells(cells, pos_idx))
    _, ok = _unit_rows(raw.data)
    valid = np.flatnonzero(ok)
    if valid.size == 0:
        return None
    blocks = T.gather_rows(raw, valid) if valid.size < len(labels) else raw
    return _grouped_mean(blocks, _draw(queues, labels, valid, cfg, rng),
                         lambda qq, p, n: rare_loss_batch(qq, p, n, cfg.tau, cfg.denominator))


StepHook = Callable[[int, ModelPair, LossBreakdown], None]


def finetune(cfg: TrainConfig, checkpoint, train: PlantedSplit, test: PlantedSplit | None = None,
             masked_test: np.ndarray | None = None, on_step: StepHook | None = None
             ) -> tuple[Model, MetricsRecord]:
    """Fine-tune on ``train`` under ``cfg.method``.

    Per batch: encode, classify, then (by method) the supervised contrastive
    term on normalised logits, the rare-patch term on the selected cells, and
    the front-door term; total, backward, SGD, EMA update of the key model, and
    finally enqueueing fresh keys from the key model.

    ``on_step(step, pair, breakdown)`` is called after each EMA update.
    """
    cfg = cfg.validate()
    start = time.perf_counter()
    n_classes = cfg.bench.downstream_classes
    model = build_finetune_model(cfg, checkpoint, n_classes)
    pair = ModelPair(model, cfg.ema_momentum)
    queues = _init_queues(cfg, n_classes)
    use_con, use_r, use_s = cfg.terms
    params = model.encoder.parameters() + model.classifier.parameters()
    if use_s:
        params += model.head.parameters()

    rng_batches = stream(cfg.seed, "batches")
    rng_img = stream(cfg.seed, "image_sampling")
    rng_patch = stream(cfg.seed, "patch_sampling")
    rng_z = stream(cfg.seed, "z_noise")
    cells_all = to_cells(train.images, cfg.bench.grid, cfg.bench.patch)
    record = MetricsRecord(cfg.method, cfg.seed)

    def evaluate_all(epoch: int) -> None:
        record.add(epoch, "train", "accuracy", evaluate(model, cells_all, train.labels, cfg.eval_head))
        if test is not None:
            record.add(epoch, "test", "accuracy", evaluate(model, test.images, test.labels, cfg.eval_head))
        if masked_test is not None and test is not None:
            record.add(epoch, "test_masked", "accuracy",
                       evaluate(model, masked_test, test.labels, cfg.eval_head))

    evaluate_all(0)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        epoch_bd: list[LossBreakdown] = []
        for idx in _batches(len(train), cfg.batch_size, cfg.iters_per_epoch, rng_batches):
            cells, labels = cells_all[idx], train.labels[idx]
            fmap = encode(model.encoder, cells)
            logits = classify(model.classifier, fmap)
            parts: dict = {"l_ce": cross_entropy(logits, labels)}
            if use_con:
                parts["l_con"] = _contrastive_term(cfg, logits, labels, queues.image, rng_img)
            if use_r:
                parts["l_r"] = _rare_term(cfg, model, cells, fmap, logits, labels, queues.patch, rng_patch)
            if use_s:
                noise = rng_z.normal(size=(len(idx), cfg.d_z)) if cfg.sample_z else None
                out = front_door_forward(model.head, fmap, "train", noise)
                parts["l_s_ce"] = frontdoor_ce(out.probabilities, labels)
                if cfg.ls_kl:
                    parts["l_s_kl"] = kl_to_standard_normal(out.mu, out.sigma)
            try:
                bd = total_loss(parts, cfg.alpha, cfg.beta)
            except NumericalError as exc:
                raise RunError(f"{cfg.method} seed={cfg.seed} step {step}: {exc}") from exc
            T.backward(bd.tensor)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            T.sgd_step(params, cfg.lr, cfg.sgd_momentum)
            ema_update(pair)
            bd.tensor = None
            record.history.append(bd)
            epoch_bd.append(bd)
            if on_step is not None:
                on_step(step, pair, bd)
            _enqueue_keys(cfg, pair, queues, cells, labels, step)
            step += 1
        for name in ("l_ce", "l_con", "l_r", "l_s_ce", "l_s_kl", "total"):
            record.add(epoch, "train", name, float(np.mean([getattr(b, name) for b in epoch_bd])))
        evaluate_all(epoch)
        log.info("finetune %s seed=%d epoch=%d total=%.4f", cfg.method, cfg.seed, epoch,
                 np.mean([b.total for b in epoch_bd]))
    if test is not None:
        record.final_test_accuracy = record.series("test", "accuracy")[-1]
    if masked_test is not None and test is not None:
        record.final_masked_accuracy = record.series("test_masked", "accuracy")[-1]
    record.wall_clock = time.perf_counter() - start
    return model, record


def oracle_model(cfg: TrainConfig, bank: GlyphBank) -> Model:
    """Hand-built model whose channel k fires only on rare glyph k.

    Channel k thresholds the dot product of a cell with the centred, unit-norm
    template of rare glyph k halfway between the template's self-response and
    the strongest response to any other glyph; the classifier reads channel k
    for class k.
    """
    k = cfg.bench.downstream_classes
    if k > min(cfg.d_patch, cfg.channels):
        raise ContractError("oracle_model: too few channels for the downstream classes")
    model = build_finetune_model(cfg.with_updates(method="scratch"), None, k)
    flat = bank.templates.reshape(len(bank.templates), -1)
    enc = model.encoder.params
    embed = np.zeros_like(enc["embed"].data)
    w1 = np.zeros_like(enc["w1"].data)
    b1 = np.zeros_like(enc["b1"].data)
    w2 = np.zeros_like(enc["w2"].data)
    weight = np.zeros_like(model.classifier.weight.data)
    for c in range(k):
        t = flat[bank.rare[c]] - flat[bank.rare[c]].mean()
        t /= np.linalg.norm(t)
        responses = flat @ t
        own = responses[bank.rare[c]]
        other = np.delete(responses, bank.rare[c]).max()
        embed[:, c] = t
        w1[c, c] = 1.0
        b1[c] = -0.5 * (own + other)
        w2[c, c] = 1.0
        weight[c, c] = 1.0
    enc["embed"].data, enc["w1"].data, enc["b1"].data, enc["w2"].data = embed, w1, b1, w2
    enc["b2"].data = np.zeros_like(enc["b2"].data)
    model.classifier.weight.data = weight
    return model


def records_to_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        for epoch, split, metric, value in r.rows:
            w.writerow((r.method, r.seed, epoch, split, metric, format(value, ".17g")))
    return buf.getvalue()


def write_metrics(out_dir, records: Sequence[MetricsRecord], name: str = "metrics") -> Path:
    out = Path(out_dir)
    path = atomic_write_text(out / f"{name}.csv", records_to_csv(records))
    atomic_write_text(out / f"{name}_summary.json",
                      json.dumps([r.summary() for r in records], indent=2, sort_keys=True))
    return path


def prepare_seed(cfg: TrainConfig):
    """Datasets and the masked test images for ``cfg.seed``."""
    bench = bench_for_seed(cfg)
    pre, tr, te = generate(bench)
    return (pre, tr, te), mask_non_rare(te, bench)


def run_matrix(methods: Sequence[str], seeds: Sequence[int], cfg: TrainConfig,
               out_dir=None, save_checkpoints: bool = False) -> list[MetricsRecord]:
    """Pre-train once per seed, then fine-tune every method from that checkpoint."""
    if not methods or not seeds:
        raise ContractError("run_matrix: methods and seeds must be non-empty")
    from ..nets import save_checkpoint

    records: list[MetricsRecord] = []
    for seed in seeds:
        scfg = cfg.with_updates(seed=int(seed)).validate()
        (pre, tr, te), masked = prepare_seed(scfg)
        pre_record = MetricsRecord("pretrain", int(seed))
        ckpt = None
        if any(m != "scratch" for m in methods):
            ckpt = pretrain(scfg, pre, pre_record)
            if out_dir is not None and save_checkpoints:
                save_checkpoint(Path(out_dir) / f"seed_{seed}" / "pretrain.npz", ckpt,
                                {"seed": int(seed)})
        records.append(pre_record)
        for method in methods:
            mcfg = scfg.with_updates(method=method).validate()
            try:
                _, rec = finetune(mcfg, ckpt, tr, te, masked)
            except (RunError, DomainError, NumericalError) as exc:
                raise RunError(f"matrix cell (method={method}, seed={seed}) failed: {exc}") from exc
            records.append(rec)
            if out_dir is not None:
                atomic_write_text(Path(out_dir) / f"seed_{seed}" / f"{method}.json",
                                  json.dumps(rec.summary(), indent=2, sort_keys=True))
    if out_dir is not None:
        write_metrics(out_dir, records)
    return records


def mean_final(records: Sequence[MetricsRecord], method: str, attr: str = "final_test_accuracy") -> float:
    vals = [getattr(r, attr) for r in records if r.method == method]
    return float(np.mean(vals)) if vals else float("nan")
