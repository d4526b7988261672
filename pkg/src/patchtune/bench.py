"""Synthetic benchmark with planted rare and spuriously correlated glyphs.

Images are ``G x G`` grids of ``p x p`` cells. Each cell is background noise
or a glyph template plus noise, clipped to ``[0, 1]``.

Pre-training set (``pretrain_classes`` labels):
  * ``signature_cells`` cells carry the signature glyph of the image's label;
  * glyph A appears with probability ``a_rate`` regardless of label; given A,
    glyph B appears with probability ``spurious_strength`` in the spurious class
    and ``b_other_rate`` elsewhere;
  * ``distractor_cells`` cells carry generic distractor glyphs;
  * with probability ``rare_rate`` one rare glyph, chosen uniformly and
    independently of the label, is placed at a random cell.

Downstream sets: the label is the identity of the single rare glyph in the
image; B appears in a fixed fraction of images of every class; signature
glyphs of the pre-training classes appear as distractors.

Optional shape controls: ``rare_ink_density`` sets the ink density of the rare
templates; ``rare_base_flips > 0`` derives every rare template from one shared
base by flipping that many pixels (a fine-grained rare family); and
``downstream_distractor_intensity`` scales every non-rare glyph in downstream
images.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError
from .io import atomic_savez

SPLITS = ("pretrain", "train", "test")
_SPLIT_IDS = {"pretrain": 0, "train": 1, "test": 2}


@dataclass(frozen=True)
class PlantedConfig:
    grid: int = 6
    patch: int = 5
    pretrain_classes: int = 8
    downstream_classes: int = 4
    rare_glyphs: int = 4
    rare_rate: float = 0.02
    spurious_class: int = 0
    spurious_strength: float = 0.95
    a_rate: float = 0.5
    b_other_rate: float = 0.05
    downstream_b_rate: float = 0.5
    signature_cells: int = 2
    distractor_cells: int = 3
    distractor_glyphs: int = 4
    downstream_signature_cells: int = 3
    ink_density: float = 0.4
    rare_ink_density: float = 0.4
    rare_base_flips: int = 0
    downstream_distractor_intensity: float = 1.0
    max_template_corr: float = 0.5
    noise_sigma: float = 0.1
    n_pretrain: int = 6000
    n_train: int = 800
    n_test: int = 800
    seed: int = 0

    def validate(self) -> "PlantedConfig":
        if not 0.0 <= self.rare_rate <= 0.05:
            raise ConfigError(f"rare_rate must lie in [0, 0.05], got {self.rare_rate}")
        if not 0.8 <= self.spurious_strength <= 1.0:
            raise ConfigError(f"spurious_strength must lie in [0.8, 1], got {self.spurious_strength}")
        if self.downstream_classes > self.rare_glyphs:
            raise ConfigError("more downstream classes than rare glyphs")
        if self.downstream_classes < 2 or self.pretrain_classes < 2:
            raise ConfigError("need at least two classes in each task")
        if not 0 <= self.spurious_class < self.pretrain_classes:
            raise ConfigError("spurious_class out of range")
        for name in ("a_rate", "b_other_rate", "downstream_b_rate", "ink_density", "rare_ink_density",
                     "downstream_distractor_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        cells = self.grid * self.grid
        need_pre = self.signature_cells + 2 + self.distractor_cells + 1
        need_down = 1 + 2 + self.downstream_signature_cells + self.distractor_cells
        if max(need_pre, need_down) > cells:
            raise ConfigError(f"grid of {cells} cells cannot hold {max(need_pre, need_down)} glyphs")
        if not 0 <= self.rare_base_flips <= self.patch * self.patch:
            raise ConfigError("rare_base_flips must lie in [0, patch * patch]")
        if min(self.n_pretrain, self.n_train, self.n_test) < 1 or self.noise_sigma < 0:
            raise ConfigError("dataset sizes must be positive and noise non-negative")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown bench fields {sorted(extra)}")
        return cls(**d)


@dataclass
class GlyphBank:
    """Binary ``p x p`` templates, indexed by role."""

    templates: np.ndarray
    signature: list[int]
    rare: list[int]
    a: int
    b: int
    distractor: list[int]

    @classmethod
    def build(cls, config: PlantedConfig) -> "GlyphBank":
        n_sig, n_rare, n_dis = config.pretrain_classes, config.rare_glyphs, config.distractor_glyphs
        n = n_sig + n_rare + 2 + n_dis
        rng = np.random.default_rng([config.seed, 7919])
        pp = config.patch * config.patch
        bank = np.zeros((n, pp))

        rare_ids = set(range(n_sig, n_sig + n_rare))

        def draw(density):
            while True:
                t = (rng.random(pp) < density).astype(np.float64)
                if 0 < t.sum() < pp:
                    return t

        base = draw(config.rare_ink_density) if config.rare_base_flips else None

        def candidate(i):
            if i not in rare_ids:
                return draw(config.ink_density)
            if base is None:
                return draw(config.rare_ink_density)
            t = base.copy()
            flip = rng.choice(pp, size=config.rare_base_flips, replace=False)
            t[flip] = 1.0 - t[flip]
            return t

        for i in range(n):
            for _ in range(10_000):
                t = candidate(i)
                if 0 < t.sum() < pp and (i == 0 or np.abs(_corr(t, bank[:i])).max() < config.max_template_corr):
                    bank[i] = t
                    break
            else:
                raise ConfigError("could not build a glyph bank with low template correlation")
        ids = list(range(n))
        return cls(bank.reshape(n, config.patch, config.patch), ids[:n_sig],
                   ids[n_sig:n_sig + n_rare], n_sig + n_rare, n_sig + n_rare + 1,
                   ids[n_sig + n_rare + 2:])

    def correlations(self) -> np.ndarray:
        flat = self.templates.reshape(len(self.templates), -1)
        return np.corrcoef(flat)


def _corr(t: np.ndarray, others: np.ndarray) -> np.ndarray:
    tc = t - t.mean()
    oc = others - others.mean(axis=1, keepdims=True)
    return (oc @ tc) / (np.linalg.norm(oc, axis=1) * np.linalg.norm(tc))


@dataclass
class PlantedSplit:
    """One dataset split with its planting metadata.

    ``rare_pos`` / ``rare_id`` are -1 when no rare glyph was planted; ``rare_id``
    indexes the rare glyph list (equal to the label for downstream splits).
    """

    name: str
    images: np.ndarray
    labels: np.ndarray
    rare_pos: np.ndarray
    rare_id: np.ndarray
    has_a: np.ndarray
    has_b: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def _render(cells: list[np.ndarray | None], config: PlantedConfig,
            rng: np.random.Generator) -> np.ndarray:
    g, p = config.grid, config.patch
    img = np.zeros((g * p, g * p))
    noise = rng.normal(0.0, config.noise_sigma, size=(g * p, g * p)) if config.noise_sigma else 0.0
    for n, glyph in enumerate(cells):
        if glyph is not None:
            r, c = divmod(n, g)
            img[r * p:(r + 1) * p, c * p:(c + 1) * p] = glyph
    return np.clip(img + noise, 0.0, 1.0)


def _pretrain_example(i: int, label: int, bank: GlyphBank, config: PlantedConfig):
    rng = np.random.default_rng([config.seed, _SPLIT_IDS["pretrain"], i])
    n_cells = config.grid * config.grid
    order = list(rng.permutation(n_cells))
    cells: list[np.ndarray | None] = [None] * n_cells
    for _ in range(config.signature_cells):
        cells[order.pop()] = bank.templates[bank.signature[label]]
    has_a = rng.random() < config.a_rate
    b_draw = rng.random()
    has_b = False
    if has_a:
        cells[order.pop()] = bank.templates[bank.a]
        p_b = config.spurious_strength if label == config.spurious_class else config.b_other_rate
        if b_draw < p_b:
            has_b = True
            cells[order.pop()] = bank.templates[bank.b]
    for _ in range(config.distractor_cells):
        cells[order.pop()] = bank.templates[bank.distractor[rng.integers(len(bank.distractor))]]
    rare_draw = rng.random()
    rare_which = int(rng.integers(config.rare_glyphs))
    rare_pos, rare_id = -1, -1
    if rare_draw < config.rare_rate:
        rare_pos, rare_id = int(order.pop()), rare_which
        cells[rare_pos] = bank.templates[bank.rare[rare_id]]
    return _render(cells, config, rng), rare_pos, rare_id, has_a, has_b


def _downstream_example(split: str, i: int, label: int, bank: GlyphBank, config: PlantedConfig):
    rng = np.random.default_rng([config.seed, _SPLIT_IDS[split], i])
    n_cells = config.grid * config.grid
    order = list(rng.permutation(n_cells))
    cells: list[np.ndarray | None] = [None] * n_cells
    rare_pos = int(order.pop())
    cells[rare_pos] = bank.templates[bank.rare[label]]
    has_a = rng.random() < config.a_rate
    has_b = rng.random() < config.downstream_b_rate
    faint = config.downstream_distractor_intensity
    if has_a:
        cells[order.pop()] = faint * bank.templates[bank.a]
    if has_b:
        cells[order.pop()] = faint * bank.templates[bank.b]
    for _ in range(config.downstream_signature_cells):
        cells[order.pop()] = faint * bank.templates[bank.signature[rng.integers(len(bank.signature))]]
    for _ in range(config.distractor_cells):
        cells[order.pop()] = faint * bank.templates[bank.distractor[rng.integers(len(bank.distractor))]]
    return _render(cells, config, rng), rare_pos, label, has_a, has_b


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _assemble(name, rows, labels) -> PlantedSplit:
    imgs, pos, rid, a, b = zip(*rows)
    return PlantedSplit(name, np.stack(imgs), np.asarray(labels, dtype=np.int64),
                        np.asarray(pos, dtype=np.int64), np.asarray(rid, dtype=np.int64),
                        np.asarray(a, dtype=bool), np.asarray(b, dtype=bool))


def generate(config: PlantedConfig) -> tuple[PlantedSplit, PlantedSplit, PlantedSplit]:
    """Build the pre-training, downstream-train and downstream-test splits.

    Every example is drawn from its own generator seeded by
    ``(seed, split, index)``, so generation is deterministic and the splits
    never share a random stream.
    """
    config.validate()
    bank = GlyphBank.build(config)
    label_rng = np.random.default_rng([config.seed, 104729])
    pre_labels = _balanced_labels(config.n_pretrain, config.pretrain_classes, label_rng)
    tr_labels = _balanced_labels(config.n_train, config.downstream_classes, label_rng)
    te_labels = _balanced_labels(config.n_test, config.downstream_classes, label_rng)
    pre = _assemble("pretrain", [_pretrain_example(i, int(y), bank, config)
                                 for i, y in enumerate(pre_labels)], pre_labels)
    tr = _assemble("train", [_downstream_example("train", i, int(y), bank, config)
                             for i, y in enumerate(tr_labels)], tr_labels)
    te = _assemble("test", [_downstream_example("test", i, int(y), bank, config)
                            for i, y in enumerate(te_labels)], te_labels)
    return pre, tr, te


def mask_non_rare(split: PlantedSplit, config: PlantedConfig) -> np.ndarray:
    """Images with every cell except the planted rare one set to zero."""
    g, p = config.grid, config.patch
    out = np.zeros_like(split.images)
    for i, pos in enumerate(split.rare_pos):
        if pos < 0:
            continue
        r, c = divmod(int(pos), g)
        out[i, r * p:(r + 1) * p, c * p:(c + 1) * p] = split.images[i, r * p:(r + 1) * p, c * p:(c + 1) * p]
    return out


def _binomial_check(successes: int, trials: int, p: float, z: float) -> dict:
    rate = successes / trials if trials else float("nan")
    half = z * np.sqrt(p * (1 - p) / trials) if trials else float("nan")
    ok = bool(trials and abs(rate - p) <= half) if p not in (0.0, 1.0) else bool(rate == p)
    return {"observed": rate, "expected": p, "trials": int(trials),
            "interval": [p - half, p + half], "ok": ok}


def audit(datasets, config: PlantedConfig, confidence: float = 0.99) -> dict:
    """Empirical planting statistics against their configured values.

    Each binomial quantity is checked against a normal-approximation interval at
    ``confidence``; rare-glyph identity versus pre-training label is checked with
    a chi-square independence test.
    """
    pre, tr, te = datasets
    z = float(stats.norm.ppf(0.5 + confidence / 2))
    report: dict = {"confidence": confidence}
    report["rare_frequency"] = _binomial_check(int((pre.rare_pos >= 0).sum()), len(pre),
                                               config.rare_rate, z)
    in_c = (pre.labels == config.spurious_class) & pre.has_a
    out_c = (pre.labels != config.spurious_class) & pre.has_a
    report["b_given_a_spurious_class"] = _binomial_check(int(pre.has_b[in_c].sum()), int(in_c.sum()),
                                                         config.spurious_strength, z)
    report["b_given_a_other_classes"] = _binomial_check(int(pre.has_b[out_c].sum()), int(out_c.sum()),
                                                        config.b_other_rate, z)
    for split in (tr, te):
        shares = np.bincount(split.labels, minlength=config.downstream_classes) / len(split)
        report[f"{split.name}_class_balance"] = {
            "shares": shares.tolist(), "spread": float(shares.max() - shares.min()),
            "ok": bool(shares.max() - shares.min() <= 0.02 or len(split) < 2000)}
        report[f"{split.name}_label_is_rare_id"] = bool((split.labels == split.rare_id).all())
    table = np.zeros((config.rare_glyphs + 1, config.pretrain_classes))
    np.add.at(table, (pre.rare_id + 1, pre.labels), 1)
    table = table[table.sum(axis=1) > 0]
    if table.shape[0] > 1:
        chi2, pval, dof, _ = stats.chi2_contingency(table, correction=False)
        crit = float(stats.chi2.ppf(confidence, dof))
        report["rare_label_independence"] = {"chi2": float(chi2), "dof": int(dof),
                                             "critical": crit, "ok": bool(chi2 < crit)}
    else:
        report["rare_label_independence"] = {"chi2": 0.0, "dof": 0, "critical": 0.0, "ok": True}
    lo, hi = float(min(s.images.min() for s in datasets)), float(max(s.images.max() for s in datasets))
    report["pixel_range"] = {"min": lo, "max": hi, "ok": bool(lo >= 0.0 and hi <= 1.0)}
    report["ok"] = all(v["ok"] if isinstance(v, dict) else bool(v)
                       for k, v in report.items() if k not in ("confidence",))
    return report


def save_datasets(path, datasets, config: PlantedConfig) -> Path:
    """NPZ archive with ``<split>_<field>`` arrays and the config as JSON text."""
    arrays = {"config": np.array(json.dumps(asdict(config), sort_keys=True))}
    for split in datasets:
        for f in ("images", "labels", "rare_pos", "rare_id", "has_a", "has_b"):
            arrays[f"{split.name}_{f}"] = getattr(split, f)
    return atomic_savez(path, **arrays)


def load_datasets(path) -> tuple[tuple[PlantedSplit, ...], PlantedConfig]:
    with np.load(path, allow_pickle=False) as z:
        config = PlantedConfig.from_dict(json.loads(str(z["config"])))
        splits = tuple(PlantedSplit(name, *(z[f"{name}_{f}"].copy() for f in
                                            ("images", "labels", "rare_pos", "rare_id", "has_a", "has_b")))
                       for name in SPLITS)
    return splits, config
