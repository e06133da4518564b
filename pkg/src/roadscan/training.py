"""Losses, regularization and the Siamese training loop.

Triplet loss is the default; the pairwise contrastive form
(1/2N) sum[y d^2 + (1-y) max(margin-d, 0)^2] is available as an
alternative. Optimization is RMSprop with validation-loss early
stopping and best-epoch weight restoration.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .network import SiameseModel


class ParameterError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class DegeneracyError(ValueError):
    """The data cannot support the requested fit (e.g. one class only)."""


@dataclass
class TrainConfig:
    loss_kind: str = "triplet"  # "triplet" | "contrastive"
    margin: float = 1.0
    batch_size: int = 32
    max_epochs: int = 20
    early_stop_patience: int = 5
    rmsprop_rho: float = 0.9
    learning_rate: float = 1e-3
    rmsprop_epsilon: float = 1e-8
    l2_coefficient: float | None = None  # None = per-layer spec coefficients
    seed: int = 0
    input_mode: str = "raw"  # "raw" | "otsu_binary"
    image_size: int = 32
    preset: str = "roadscan_head"
    pair_budget: int = 2000
    triplet_budget: int = 1000
    val_fraction: float = 0.15
    similarity_epochs: int = 200

    def __post_init__(self):
        if self.margin <= 0:
            raise ParameterError("margin must be positive")
        if self.early_stop_patience > self.max_epochs:
            raise ParameterError("patience cannot exceed max_epochs")
        if self.loss_kind not in ("triplet", "contrastive"):
            raise ParameterError(f"unknown loss kind {self.loss_kind!r}")
        if self.input_mode not in ("raw", "otsu_binary"):
            raise ParameterError(f"unknown input mode {self.input_mode!r}")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ParameterError(f"{path}: line {e.lineno} col {e.colno}: {e.msg}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ParameterError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss,seconds\n")
            for i, (tl, vl, s) in enumerate(
                zip(self.train_loss, self.val_loss, self.seconds), start=1
            ):
                fh.write(f"{i},{tl:.8f},{vl:.8f},{s:.3f}\n")


# -- losses ------------------------------------------------------------


def contrastive_loss(y: np.ndarray, d: Tensor, margin: float = 1.0) -> Tensor:
    """(1/2N) sum[y d^2 + (1-y) max(margin-d, 0)^2] over the batch."""
    n = int(np.asarray(y).size)
    if n == 0:
        raise ParameterError("contrastive_loss needs a nonempty batch")
    y = np.asarray(y, dtype=d.dtype).reshape(-1)
    ym = Tensor(y, dtype=d.dtype)
    pos = T.mul(ym, T.square(d))
    hinge = T.relu(T.sub(Tensor(np.full(n, margin), dtype=d.dtype), d))
    neg = T.mul(Tensor(1.0 - y, dtype=d.dtype), T.square(hinge))
    return T.mul(T.tsum(T.add(pos, neg)), Tensor(1.0 / (2 * n), dtype=d.dtype))


def triplet_loss(d_ap: Tensor, d_an: Tensor, margin: float = 1.0) -> Tensor:
    """mean(max(d_ap - d_an + margin, 0)) over the batch."""
    gap = T.add(T.sub(d_ap, d_an), Tensor(margin, dtype=d_ap.dtype))
    return T.tmean(T.relu(gap))


def contrastive_loss_value(y, d, margin: float = 1.0) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ParameterError("contrastive_loss needs a nonempty batch")
    return float(
        (y * d**2 + (1 - y) * np.maximum(margin - d, 0) ** 2).sum() / (2 * y.size)
    )


def triplet_loss_value(d_ap, d_an, margin: float = 1.0) -> float:
    d_ap = np.asarray(d_ap, dtype=np.float64).reshape(-1)
    d_an = np.asarray(d_an, dtype=np.float64).reshape(-1)
    return float(np.maximum(d_ap - d_an + margin, 0).mean())


def _weight_tensors(model: SiameseModel):
    """(l2 coefficient, weight tensor) for every conv/dense weight."""
    out = []
    for layer, p in zip(model.embed.spec.layers, model.embed.parameters):
        if layer.kind in ("conv", "dense") and "w" in p:
            out.append((layer.l2_coefficient, p["w"]))
    return out


def l2_penalty(model: SiameseModel, coefficient: float | None) -> Tensor:
    """L2 penalty over conv/dense weights (biases and batchnorm excluded).

    ``coefficient`` None uses each layer's own l2 coefficient; a number
    applies uniformly.
    """
    terms = None
    for layer_coef, w in _weight_tensors(model):
        coef = layer_coef if coefficient is None else coefficient
        if coef <= 0:
            continue
        term = T.mul(T.tsum(T.square(w)), Tensor(coef, dtype=w.dtype))
        terms = term if terms is None else T.add(terms, term)
    if terms is None:
        return Tensor(0.0)
    return terms


# -- training loop -----------------------------------------------------


def _model_params(model: SiameseModel):
    return model.embed.trainable_tensors() + [model.sim_w, model.sim_b]


def _zero_grads(params):
    for p in params:
        p.zero_grad()


def _snapshot(model: SiameseModel):
    return model.embed.snapshot() + [model.sim_w.data.copy(), model.sim_b.data.copy()]


def _restore(model: SiameseModel, snap):
    model.embed.restore(snap[:-2])
    model.sim_w.data[...] = snap[-2]
    model.sim_b.data[...] = snap[-1]


def _batch(images, ids):
    return Tensor(np.stack([images[i] for i in ids]))


def _pair_loss(model, pairs, images, config, mode, rng):
    ea = model.embed_batch(_batch(images, [p.a for p in pairs]), mode, rng)
    eb = model.embed_batch(_batch(images, [p.b for p in pairs]), mode, rng)
    d = T.euclidean_distance(ea, eb)
    y = np.array([p.label for p in pairs])
    return contrastive_loss(y, d, config.margin)


def _triplet_batch_loss(model, triplets, images, config, mode, rng):
    ea = model.embed_batch(_batch(images, [t.anchor for t in triplets]), mode, rng)
    ep = model.embed_batch(_batch(images, [t.positive for t in triplets]), mode, rng)
    en = model.embed_batch(_batch(images, [t.negative for t in triplets]), mode, rng)
    d_ap = T.euclidean_distance(ea, ep)
    d_an = T.euclidean_distance(ea, en)
    return triplet_loss(d_ap, d_an, config.margin)


def train(
    model: SiameseModel,
    train_units: list,
    val_units: list,
    images: dict,
    config: TrainConfig,
) -> TrainHistory:
    """Optimize the embedding network in place; returns the history.

    ``train_units``/``val_units`` are LabeledPair or Triplet lists per
    config.loss_kind; ``images`` maps sample id to a [C,H,W] float32
    array. The model ends at its best-validation-epoch snapshot.
    """
    if not train_units:
        raise ParameterError("empty training set")
    if not val_units:
        raise ParameterError("early stopping requires a nonempty validation set")
    loss_fn = _triplet_batch_loss if config.loss_kind == "triplet" else _pair_loss
    params = _model_params(model)
    opt = T.RmspropState(
        learning_rate=config.learning_rate,
        decay_rho=config.rmsprop_rho,
        epsilon=config.rmsprop_epsilon,
    )
    history = TrainHistory()
    best_val = np.inf
    best_snap = None
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        shuffle_rng = np.random.default_rng((config.seed, epoch))
        order = shuffle_rng.permutation(len(train_units))
        drop_rng = np.random.default_rng((config.seed, epoch, 1))
        losses = []
        for bi in range(0, len(order), config.batch_size):
            batch = [train_units[i] for i in order[bi : bi + config.batch_size]]
            _zero_grads(params)
            loss = loss_fn(model, batch, images, config, "train", drop_rng)
            penalty = l2_penalty(model, config.l2_coefficient)
            if penalty.size == 1 and penalty._parents:
                loss = T.add(loss, penalty)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {bi // config.batch_size}"
                )
            loss.backward()
            T.rmsprop_step(params, opt)
            losses.append(lv)
        val = evaluate_loss(model, val_units, images, config)
        history.train_loss.append(float(np.mean(losses)))
        history.val_loss.append(val)
        history.seconds.append(time.perf_counter() - t0)
        if val < best_val:
            best_val = val
            best_snap = _snapshot(model)
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        history.stopped_epoch = epoch
        if since_best >= config.early_stop_patience:
            break
    if best_snap is not None:
        _restore(model, best_snap)
    return history


def evaluate_loss(model: SiameseModel, units, images, config: TrainConfig) -> float:
    """Mean loss over ``units`` in eval mode (batched, no gradients)."""
    loss_fn = _triplet_batch_loss if config.loss_kind == "triplet" else _pair_loss
    total, n = 0.0, 0
    for bi in range(0, len(units), config.batch_size):
        batch = units[bi : bi + config.batch_size]
        loss = loss_fn(model, batch, images, config, "eval", None)
        total += float(loss.data) * len(batch)
        n += len(batch)
    return total / max(n, 1)


def fit_similarity_head(
    model: SiameseModel,
    pairs,
    images: dict,
    epochs: int,
    learning_rate: float = 0.05,
) -> None:
    """Fit sigmoid(w . |delta e| + b) by BCE with the embedding frozen."""
    labels = {p.label for p in pairs}
    if labels != {0, 1}:
        raise DegeneracyError(
            f"similarity fit needs both pair labels, got {sorted(labels)}"
        )
    if epochs == 0:
        return
    ids = sorted({p.a for p in pairs} | {p.b for p in pairs})
    emb = {}
    for bi in range(0, len(ids), 64):
        chunk = ids[bi : bi + 64]
        out = model.embed_batch(_batch(images, chunk), "eval", None)
        for cid, vec in zip(chunk, out.data):
            emb[cid] = vec
    diff = np.stack([np.abs(emb[p.a] - emb[p.b]) for p in pairs]).astype(np.float32)
    y = np.array([p.label for p in pairs], dtype=np.float32)
    x = Tensor(diff)
    yt = Tensor(y.reshape(-1, 1))
    opt = T.RmspropState(learning_rate=learning_rate)
    for _ in range(epochs):
        model.sim_w.zero_grad()
        model.sim_b.zero_grad()
        w = T.reshape(model.sim_w, (model.embedding_dim(), 1))
        p = T.sigmoid(T.dense(x, w, model.sim_b))
        one = Tensor(np.ones_like(p.data))
        bce = T.tmean(
            T.sub(
                Tensor(0.0),
                T.add(
                    T.mul(yt, T.log(p)),
                    T.mul(T.sub(one, yt), T.log(T.sub(one, p))),
                ),
            )
        )
        bce.backward()
        T.rmsprop_step([model.sim_w, model.sim_b], opt)
