"""Encoder, classifier, front-door attention head and the momentum twin.

Images are square grids of ``G x G`` cells, each ``p x p`` pixels. The encoder
is applied to each cell independently (shared weights), so a feature map has
one column per cell: shape ``(C, N)`` with ``N = G * G``, or ``(B, C, N)`` for
a batch. Cell ``n`` sits at grid row ``n // G`` and column ``n % G``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .io import atomic_savez
from .tensor import Tensor

# log-variance is squashed into (-LOGVAR_BOUND, LOGVAR_BOUND) so sigma stays positive
LOGVAR_BOUND = 10.0


def to_cells(images: np.ndarray, grid: int, patch: int) -> np.ndarray:
    """Split ``(..., G*p, G*p)`` images into ``(..., N, p*p)`` row-major cells."""
    images = np.asarray(images, dtype=np.float64)
    side = grid * patch
    if images.shape[-2:] != (side, side):
        raise ShapeError(f"image side {images.shape[-2:]} does not match grid {grid}x{patch}")
    lead = images.shape[:-2]
    x = images.reshape(*lead, grid, patch, grid, patch)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, grid * grid, patch * patch)


def _param(rng: np.random.Generator, shape, fan_in: int, name: str, gain: float = 2.0) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str, value: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


class Module:
    """Minimal parameter container; subclasses fill ``self.params`` in order."""

    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + k, v) for k, v in self.params.items()]


class Encoder(Module):
    """Per-cell feature extractor: linear patch embedding then a 2-layer ReLU MLP.

    The final ReLU makes every feature non-negative.
    """

    def __init__(self, grid: int, patch: int, d_patch: int, channels: int,
                 rng: np.random.Generator, hidden: int | None = None):
        self.grid = grid
        self.patch = patch
        self.channels = channels
        hidden = hidden or channels
        pp = patch * patch
        self.params = {
            "embed": _param(rng, (pp, d_patch), pp, "encoder.embed", gain=1.0),
            "w1": _param(rng, (d_patch, hidden), d_patch, "encoder.w1"),
            "b1": _zeros((hidden,), "encoder.b1"),
            "w2": _param(rng, (hidden, channels), hidden, "encoder.w2"),
            "b2": _zeros((channels,), "encoder.b2", 0.01),
        }

    @property
    def positions(self) -> int:
        return self.grid * self.grid

    def encode_cells(self, cells) -> Tensor:
        """Features of individual cells, ``(..., p*p) -> (..., C)``."""
        x = cells if isinstance(cells, Tensor) else Tensor(cells)
        if x.shape[-1] != self.patch * self.patch:
            raise ShapeError(f"cell size {x.shape[-1]} != {self.patch * self.patch}")
        p = self.params
        h = T.matmul(x, p["embed"])
        h = T.relu(T.matmul(h, p["w1"]) + p["b1"])
        return T.relu(T.matmul(h, p["w2"]) + p["b2"])


class Classifier(Module):
    """Linear head ``logits = W^T pooled``; column ``y`` is the class weight ``W_y``."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator,
                 bias: bool = False):
        self.num_classes = num_classes
        self.params = {"weight": _param(rng, (channels, num_classes), channels,
                                        "classifier.weight", gain=1.0)}
        if bias:
            self.params["bias"] = _zeros((num_classes,), "classifier.bias")

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]


class FrontDoorHead(Module):
    """Patch attention, channel attention, mean/variance projector and ``phi1``.

    Args:
        channels: C, must be divisible by 8.
        d_z: size of the mediator representation.
        num_classes: output classes of ``phi1``.
        phi_input: ``"z"`` feeds only the mediator to ``phi1``; ``"z_and_aggregate"``
            also appends the sum-pooled deconfounded representation.
        channel_attention: ``"softmax"`` row-normalises the scaled Gram matrix;
            ``"gram"`` uses the raw Gram matrix.
    """

    def __init__(self, channels: int, d_z: int, num_classes: int, rng: np.random.Generator,
                 hidden: int | None = None, phi_input: str = "z",
                 channel_attention: str = "softmax"):
        if channels % 8:
            raise ConfigError(f"channels ({channels}) must be divisible by 8")
        if phi_input not in ("z", "z_and_aggregate"):
            raise ConfigError(f"unknown phi_input {phi_input!r}")
        if channel_attention not in ("softmax", "gram"):
            raise ConfigError(f"unknown channel_attention {channel_attention!r}")
        c, c8 = channels, channels // 8
        hidden = hidden or channels
        self.channels = channels
        self.d_z = d_z
        self.phi_input = phi_input
        self.channel_attention = channel_attention
        phi_in = d_z + (c if phi_input == "z_and_aggregate" else 0)
        self.params = {
            "wq": _param(rng, (c8, c), c, "head.wq", gain=1.0),
            "bq": _zeros((c8, 1), "head.bq"),
            "wk": _param(rng, (c8, c), c, "head.wk", gain=1.0),
            "bk": _zeros((c8, 1), "head.bk"),
            "wv": _param(rng, (c, c), c, "head.wv", gain=1.0),
            "bv": _zeros((c, 1), "head.bv"),
            "w1": _param(rng, (2 * c, hidden), 2 * c, "head.w1"),
            "b1": _zeros((hidden,), "head.b1"),
            "w_mu": _param(rng, (hidden, d_z), hidden, "head.w_mu", gain=1.0),
            "b_mu": _zeros((d_z,), "head.b_mu"),
            "w_logvar": _param(rng, (hidden, d_z), hidden, "head.w_logvar", gain=0.1),
            "b_logvar": _zeros((d_z,), "head.b_logvar"),
            "w_phi": _param(rng, (phi_in, num_classes), phi_in, "head.w_phi", gain=1.0),
            "b_phi": _zeros((num_classes,), "head.b_phi"),
        }


@dataclass
class Model(Module):
    encoder: Encoder
    classifier: Classifier
    head: FrontDoorHead | None = None
    params: dict[str, Tensor] = field(init=False, repr=False)

    def __post_init__(self):
        self.refresh()

    def refresh(self) -> None:
        named = self.encoder.named_parameters("encoder.") + self.classifier.named_parameters("classifier.")
        if self.head is not None:
            named += self.head.named_parameters("head.")
        self.params = dict(named)


def encode(model: Encoder, image) -> Tensor:
    """Feature map of one image ``(C, N)`` or a batch ``(B, C, N)``.

    ``image`` is either pixels ``(..., G*p, G*p)`` or pre-split cells
    ``(..., N, p*p)``.
    """
    arr = np.asarray(image, dtype=np.float64)
    pp = model.patch * model.patch
    side = model.grid * model.patch
    if arr.ndim >= 2 and arr.shape[-2:] == (side, side):
        cells = to_cells(arr, model.grid, model.patch)
    elif arr.ndim >= 2 and arr.shape[-2:] == (model.positions, pp):
        cells = arr
    else:
        raise ShapeError(f"encode: input shape {arr.shape} does not match a "
                         f"{model.grid}x{model.grid} grid of {model.patch}px cells")
    return T.transpose(model.encode_cells(cells))


def classify(classifier: Classifier, fmap: Tensor) -> Tensor:
    """Logits from mean-pooled features: ``(C, N) -> (K,)`` or ``(B, C, N) -> (B, K)``."""
    w = classifier.weight
    if fmap.ndim < 2 or fmap.shape[-2] != w.shape[0]:
        raise ShapeError(f"classify: fmap {fmap.shape} vs weight {w.shape}")
    pooled = T.mean_pool_axis(fmap, axis=-1)
    if pooled.ndim == 1:
        pooled = T.reshape(pooled, (1, -1))
        logits = T.reshape(T.matmul(pooled, w), (-1,))
    else:
        logits = T.matmul(pooled, w)
    if "bias" in classifier.params:
        logits = logits + classifier.params["bias"]
    return logits


@dataclass
class FrontDoorOutput:
    """Result of :func:`front_door_forward`.

    ``probabilities``, ``mu`` and ``sigma`` are the primary outputs; the rest is
    exposed for inspection and invariance checks.
    """

    probabilities: Tensor
    mu: Tensor
    sigma: Tensor
    z: Tensor
    patch_attention: Tensor
    channel_attention: Tensor
    aggregate: Tensor

    def __iter__(self):
        return iter((self.probabilities, self.mu, self.sigma))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


def front_door_forward(head: FrontDoorHead, fmap: Tensor, mode: str = "train",
                       noise=None) -> FrontDoorOutput:
    """Deconfounded class probabilities via patch and channel attention.

    Patch branch: ``P = softmax_rows(Q^T K)`` and ``E[Z|F] = V P``.
    Channel branch: ``S = softmax_rows(F F^T / sqrt(N))`` and ``E[F] = S F``.
    The pooled concatenation ``[E[F]; E[Z|F]]`` is projected to ``(mu, log var)``,
    with the log-variance smoothly bounded by ``LOGVAR_BOUND * tanh(. / LOGVAR_BOUND)``;
    in train mode with ``noise`` given, ``z = mu + sigma * noise``, otherwise
    ``z = mu``. Probabilities are ``softmax(phi1(z))``.
    """
    if head.channels % 8:
        raise ConfigError("front-door head needs channels divisible by 8")
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown mode {mode!r}")
    single = fmap.ndim == 2
    x = T.reshape(fmap, (1, *fmap.shape)) if single else fmap
    if x.ndim != 3 or x.shape[1] != head.channels:
        raise ShapeError(f"front_door_forward: fmap {fmap.shape}, expected (C={head.channels}, N)")
    p = head.params
    n = x.shape[2]
    q = T.matmul(p["wq"], x) + p["bq"]
    k = T.matmul(p["wk"], x) + p["bk"]
    v = T.matmul(p["wv"], x) + p["bv"]
    patch_att = T.softmax_rows(T.matmul(T.transpose(q), k))
    e_z = T.matmul(v, patch_att)

    gram = T.matmul(x, T.transpose(x))
    if head.channel_attention == "softmax":
        chan_att = T.softmax_rows(T.scalar_mul(gram, 1.0 / np.sqrt(n)))
    else:
        chan_att = gram
    e_f = T.matmul(chan_att, x)

    aggregate = T.mean_pool_axis(e_z + e_f, axis=-1)
    c = T.concat_axis([T.mean_pool_axis(e_f, axis=-1), T.mean_pool_axis(e_z, axis=-1)], axis=1)
    h = T.relu(_linear(c, p["w1"], p["b1"]))
    mu = _linear(h, p["w_mu"], p["b_mu"])
    raw_logvar = _linear(h, p["w_logvar"], p["b_logvar"])
    logvar = T.scalar_mul(T.tanh(T.scalar_mul(raw_logvar, 1.0 / LOGVAR_BOUND)), LOGVAR_BOUND)
    sigma = T.exp(T.scalar_mul(logvar, 0.5))
    if mode == "train" and noise is not None:
        eps = np.asarray(noise, dtype=np.float64).reshape(mu.shape)
        z = mu + T.mul(sigma, Tensor(eps))
    else:
        z = mu
    phi_in = z if head.phi_input == "z" else T.concat_axis([z, aggregate], axis=1)
    probs = T.softmax_rows(_linear(phi_in, p["w_phi"], p["b_phi"]))

    if single:
        def squeeze(t):
            return T.reshape(t, t.shape[1:])
        return FrontDoorOutput(squeeze(probs), squeeze(mu), squeeze(sigma), squeeze(z),
                               squeeze(patch_att), squeeze(chan_att), squeeze(aggregate))
    return FrontDoorOutput(probs, mu, sigma, z, patch_att, chan_att, aggregate)


class ModelPair:
    """Query model trained by gradients and a key model tracking it by EMA."""

    def __init__(self, query: Model, momentum: float = 0.999):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"EMA momentum must lie in [0, 1), got {momentum}")
        self.query = query
        self.key = copy.deepcopy(query)
        for t in self.key.parameters():
            t.requires_grad = False
            t.grad = None
            t.velocity = None
        self.momentum = momentum


def ema_update(pair: ModelPair) -> None:
    """``theta_k <- m * theta_k + (1 - m) * theta_q`` for every parameter."""
    q_named = pair.query.named_parameters()
    k_named = pair.key.named_parameters()
    if [n for n, _ in q_named] != [n for n, _ in k_named]:
        raise ContractError("ema_update: query and key architectures differ")
    m = pair.momentum
    for (name, q), (_, k) in zip(q_named, k_named):
        if q.shape != k.shape:
            raise ContractError(f"ema_update: shape mismatch for {name}")
        k.data = m * k.data + (1.0 - m) * q.data


def most_confusing_class(logits: np.ndarray, label: int) -> int:
    """Highest-scoring class other than ``label``."""
    masked = np.array(logits, dtype=np.float64)
    masked[label] = -np.inf
    return int(np.argmax(masked))


def select_rare_patches(fmap, logits, label: int, classifier, R: int) -> list[int]:
    """Positions of the ``R`` least class-discriminative channels' peaks.

    For the strongest wrong class ``y'``, ``u = W_y - W_y'``; the ``R`` channels
    with smallest ``|u|`` (ties: lower index) are chosen and each contributes the
    position of its maximum activation (ties: lower position).
    """
    fmap = np.asarray(getattr(fmap, "data", fmap), dtype=np.float64)
    logits = np.asarray(getattr(logits, "data", logits), dtype=np.float64).reshape(-1)
    w = classifier.weight.data if isinstance(classifier, Classifier) else np.asarray(
        getattr(classifier, "data", classifier))
    n_classes = logits.shape[0]
    if n_classes < 2:
        raise ContractError("select_rare_patches: need at least two classes")
    if not 0 <= label < n_classes:
        raise ContractError(f"select_rare_patches: label {label} out of range")
    if R > w.shape[0] or R < 1:
        raise ContractError(f"select_rare_patches: R={R} must lie in [1, C={w.shape[0]}]")
    y_conf = most_confusing_class(logits, label)
    u = w[:, label] - w[:, y_conf]
    channels = np.argsort(np.abs(u), kind="stable")[:R]
    return [int(np.argmax(fmap[ch])) for ch in channels]


def embed_patches(model: Encoder, image, positions) -> Tensor:
    """Re-encode the cells at ``positions`` and return unit-norm rows.

    ``image`` is one image (pixels or ``(N, p*p)`` cells) with ``positions`` of
    length R, giving ``(R, C)``; or a batch with ``positions`` of shape
    ``(B, R)``, giving ``(B, R, C)``. Each cell yields a single feature column,
    so its spatial mean is that column.
    """
    arr = np.asarray(image, dtype=np.float64)
    side = model.grid * model.patch
    cells = to_cells(arr, model.grid, model.patch) if arr.shape[-2:] == (side, side) else arr
    pos = np.asarray(positions, dtype=np.intp)
    if cells.shape[-2] != model.positions:
        raise ShapeError(f"embed_patches: {cells.shape[-2]} cells, expected {model.positions}")
    if pos.size and (pos.min() < 0 or pos.max() >= model.positions):
        raise ContractError(f"embed_patches: position out of range [0, {model.positions})")
    if cells.ndim == 2:
        picked = cells[pos]
    else:
        picked = np.take_along_axis(cells, pos[..., None], axis=-2)
    return T.l2_normalize_rows(model.encode_cells(picked))


def save_checkpoint(path, model: Model, meta: dict | None = None) -> Path:
    """Write an NPZ archive: one float64 array per named parameter plus ``__meta__``."""
    arrays = {name: t.data for name, t in model.named_parameters()}
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    return atomic_savez(path, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
        meta = json.loads(str(z["__meta__"])) if "__meta__" in z.files else {}
    return arrays, meta


def load_into(module: Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``arrays`` into ``module``'s parameters whose names start with ``prefix``."""
    for name, t in module.named_parameters():
        if not name.startswith(prefix):
            continue
        if name not in arrays:
            raise ContractError(f"checkpoint lacks parameter {name}")
        if arrays[name].shape != t.shape:
            raise ContractError(f"checkpoint shape {arrays[name].shape} != {t.shape} for {name}")
        t.data = np.array(arrays[name], dtype=np.float64)
