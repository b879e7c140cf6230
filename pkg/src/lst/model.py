"""Differentiable model stack: frozen backbone, scale-shift, classifier and SWN.

Parameter groups are plain ``dict[str, ndarray]`` (or dicts of ``Var`` while a
tape is recording). Names are stable and double as checkpoint keys:

* backbone: ``W0, b0, W1, b1, ...``
* scale-shift: ``scale0, shift0, ...`` mirroring the backbone shapes
* classifier: ``W`` (embed x N), ``b`` (N)
* SWN: ``W1`` (2*embed x 8), ``b1``, ``W2`` (8 x 1), ``b2``
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

log = logging.getLogger(__name__)


@dataclass
class Backbone:
    params: dict[str, np.ndarray]
    train_accuracy: float = float("nan")
    heldout_accuracy: float = float("nan")

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    @property
    def embed_dim(self) -> int:
        return self.params[f"W{self.n_layers - 1}"].shape[1]

    @property
    def input_dim(self) -> int:
        return self.params["W0"].shape[0]


def init_mlp(sizes, rng) -> dict[str, np.ndarray]:
    p = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        p[f"W{i}"] = rng.normal(size=(a, b)) * np.sqrt(2.0 / a)
        p[f"b{i}"] = np.zeros(b)
    return p


def identity_scale_shift(backbone: Backbone) -> dict[str, np.ndarray]:
    ss = {}
    for i in range(backbone.n_layers):
        ss[f"scale{i}"] = np.ones_like(backbone.params[f"W{i}"])
        ss[f"shift{i}"] = np.zeros_like(backbone.params[f"b{i}"])
    return ss


def zero_classifier(embed_dim: int, way: int) -> dict[str, np.ndarray]:
    return {"W": np.zeros((embed_dim, way)), "b": np.zeros(way)}


def init_swn(embed_dim: int, rng, hidden: int = 8) -> dict[str, np.ndarray]:
    return {
        "W1": rng.normal(size=(2 * embed_dim, hidden)) * np.sqrt(2.0 / (2 * embed_dim)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(size=(hidden, 1)) * np.sqrt(1.0 / hidden),
        "b2": np.zeros(1),
    }


def lift(tape: Tape, x) -> Var:
    """Wrap a constant for use on ``tape`` (no node when not recording)."""
    if isinstance(x, Var):
        return x
    x = np.asarray(x, dtype=np.float64)
    return tape.constant(x) if tape.recording else Var(tape, None, x, False)


def leaves(tape: Tape, params: dict[str, np.ndarray], prefix: str) -> dict[str, Var]:
    return {k: tape.leaf(v, name=f"{prefix}.{k}") for k, v in params.items()}


def extract_features(x, backbone: Backbone, scale_shift) -> Var:
    """Embed rows of ``x`` through the scale-shifted backbone (relu after every layer).

    Backbone weights enter as constants, so no gradient ever reaches them.
    """
    h = x
    if not isinstance(x, Var):
        tape = next((v.tape for v in scale_shift.values() if isinstance(v, Var)), None)
        if tape is None:
            tape = Tape()
            tape.recording = False
        h = lift(tape, x)
    if h.shape[1] != backbone.input_dim:
        raise ad.ShapeError(f"extract_features: input has {h.shape[1]} columns, backbone expects {backbone.input_dim}")
    for i in range(backbone.n_layers):
        h = ad.relu(
            ad.scale_shift_affine(
                h,
                backbone.params[f"W{i}"],
                lift(h.tape, scale_shift[f"scale{i}"]),
                backbone.params[f"b{i}"],
                lift(h.tape, scale_shift[f"shift{i}"]),
            )
        )
    return h


def classify(features: Var, classifier) -> Var:
    if features.shape[1] != ad._val(classifier["W"]).shape[0]:
        raise ad.ShapeError(
            f"classify: features {features.shape} vs classifier {ad._val(classifier['W']).shape}"
        )
    return ad.add(ad.matmul(features, classifier["W"]), classifier["b"])


def compute_prototypes(support_features: Var, support_y, way: int) -> Var:
    """Per-class mean feature (N x embed); with K=1 this is the sample itself."""
    support_y = np.asarray(support_y)
    counts = np.bincount(support_y, minlength=way)
    if len(counts) > way or np.any(counts[:way] == 0):
        raise ad.ContractError(f"compute_prototypes: every one of {way} classes needs a support sample")
    summed = ad.scatter_rows(support_features, support_y, way)
    return ad.multiply(summed, (1.0 / counts)[:, None])


def swn_scores(features: Var, prototypes: Var, swn) -> Var:
    """Raw SWN score for every (sample, class) pair, shape (n, N)."""
    n, d = features.shape
    way = prototypes.shape[0]
    if prototypes.shape[1] != d:
        raise ad.ShapeError(f"swn_weights: features {features.shape} vs prototypes {prototypes.shape}")
    pairs = ad.concat_cols(
        ad.gather_rows(features, np.repeat(np.arange(n), way)),
        ad.gather_rows(prototypes, np.tile(np.arange(way), n)),
    )
    hidden = ad.relu(ad.add(ad.matmul(pairs, swn["W1"]), swn["b1"]))
    out = ad.add(ad.matmul(hidden, swn["W2"]), swn["b2"])
    return ad.reshape(out, (n, way))


def swn_weights(features: Var, prototypes: Var, swn) -> Var:
    """Per-sample class weights, softmax-normalised across the N classes."""
    return ad.softmax_rows(swn_scores(features, prototypes, swn))


def weighted_cross_entropy(logits: Var, weights, labels) -> Var:
    """Cross-entropy of ``softmax(weights * logits)`` against ``labels``."""
    if weights is None:
        return ad.cross_entropy(logits, labels)
    return ad.cross_entropy(ad.multiply(logits, weights), labels)


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(ad._val(logits), axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# pre-training


class DivergenceError(ad.NumericDomainError):
    """Pre-training produced a non-finite loss or parameter."""


def pretrain_backbone(dataset, config, seed: int = 0, steps: int | None = None, heldout_fraction: float = 0.1) -> Backbone:
    """Train an MLP classifier over every meta-train class, then drop its head.

    Mini-batch SGD with momentum 0.9. ``steps`` caps the number of updates
    (default: ``pretrain_epochs`` passes over the training rows).
    """
    classes = dataset.split_classes["train"]
    if len(classes) == 0:
        raise ValueError("dataset has no meta-train classes")
    spc = dataset.samples_per_class
    n_hold = max(1, int(round(spc * heldout_fraction)))
    xs = dataset.x[classes]
    x_tr = xs[:, : spc - n_hold].reshape(-1, dataset.dim)
    y_tr = np.repeat(np.arange(len(classes)), spc - n_hold)
    x_ho = xs[:, spc - n_hold:].reshape(-1, dataset.dim)
    y_ho = np.repeat(np.arange(len(classes)), n_hold)

    # standardise inputs through the first layer so the backbone sees raw x
    mu, sd = x_tr.mean(0), x_tr.std(0) + 1e-8

    rng = np.random.default_rng([seed, 11])
    sizes = (dataset.dim, *config.hidden, config.embed_dim)
    body = init_mlp(sizes, rng)
    head = {"W": rng.normal(size=(config.embed_dim, len(classes))) * np.sqrt(1.0 / config.embed_dim),
            "b": np.zeros(len(classes))}
    params = {**{f"body.{k}": v for k, v in body.items()}, **{f"head.{k}": v for k, v in head.items()}}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    n = len(x_tr)
    bs = min(config.pretrain_batch, n)
    total = steps if steps is not None else config.pretrain_epochs * max(1, n // bs)
    lr0 = config.pretrain_lr
    order = rng.permutation(n)
    pos = 0
    xz_tr, xz_ho = (x_tr - mu) / sd, (x_ho - mu) / sd
    for step in range(total):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + bs]
        pos += bs
        tape = Tape()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                v = {k: tape.leaf(p, name=k) for k, p in params.items()}
                loss = ad.cross_entropy(_mlp_logits(tape, xz_tr[idx], v, len(sizes) - 1), y_tr[idx])
                g = ad.backward(tape, loss)
        except ad.NumericDomainError as exc:
            raise DivergenceError(f"pre-training diverged at step {step} ({exc}); lower pretrain_lr") from None
        lr = lr0 * 0.5 * (1 + np.cos(np.pi * step / max(total, 1)))
        for k in params:
            velocity[k] = 0.9 * velocity[k] - lr * g[k]
            params[k] = params[k] + velocity[k]

    def acc(xz, y):
        tape = Tape()
        tape.recording = False
        v = {k: lift(tape, p) for k, p in params.items()}
        return accuracy(_mlp_logits(tape, xz, v, len(sizes) - 1), y)

    # fold the standardisation into layer 0: (x - mu)/sd @ W + b
    w0 = params["body.W0"] / sd[:, None]
    b0 = params["body.b0"] - mu @ w0
    bb = {k[5:]: v for k, v in params.items() if k.startswith("body.")}
    bb["W0"], bb["b0"] = w0, b0
    backbone = Backbone(bb, acc(xz_tr, y_tr), acc(xz_ho, y_ho))
    log.info("pretrained backbone: train acc %.3f, held-out acc %.3f", backbone.train_accuracy, backbone.heldout_accuracy)
    return backbone


def _mlp_logits(tape, x, v, n_layers):
    h = lift(tape, x)
    for i in range(n_layers):
        h = ad.relu(ad.add(ad.matmul(h, v[f"body.W{i}"]), v[f"body.b{i}"]))
    return ad.add(ad.matmul(h, v["head.W"]), v["head.b"])


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    config_text: str
    config_hash: str
    extra: dict


def save_checkpoint(path, kind: str, arrays: dict[str, np.ndarray], config, extra: dict | None = None):
    """Write named float64 arrays plus the producing config to an ``.npz`` file.

    Values are stored row-major at full precision, so loading gives back
    bit-identical arrays.
    """
    meta = {
        "format": "lst-checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config.dumps(),
        "config_hash": config.config_hash(),
        "extra": extra or {},
    }
    payload = {f"p/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise CheckpointError(f"{path}: not an lst checkpoint")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "lst-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        if kind is not None and meta["kind"] != kind:
            raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {meta['kind']!r}")
        arrays = {k[2:]: z[k] for k in z.files if k.startswith("p/")}
    return Checkpoint(meta["kind"], arrays, meta["config"], meta["config_hash"], meta["extra"])
