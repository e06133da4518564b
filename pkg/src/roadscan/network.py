"""Declarative network construction and persistence.

A network is an ordered list of layer specs plus its parameter arrays.
The same machinery builds the desk-scale VGG-style backbone, the
Siamese embedding head and the ablation variants, propagates shapes
statically, runs forward passes in train or eval mode, and round-trips
states through a small binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, BatchNormState

CHECKPOINT_MAGIC = b"RSCK"
CHECKPOINT_VERSION = 1

LAYER_KINDS = {
    "conv",
    "batchnorm",
    "maxpool",
    "flatten",
    "dense",
    "dropout",
    "activation",
    "global_avg_pool",
}


class SpecError(ValueError):
    """A layer list fails validation or shape propagation."""


class CheckpointError(ValueError):
    """A checkpoint file cannot be loaded."""


class ParseError(ValueError):
    """A CSV embedding file is malformed."""


@dataclass
class LayerSpec:
    kind: str
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | None = None
    units: int | None = None
    rate: float | None = None
    act: str | None = None
    window: int | None = None
    l2_coefficient: float = 0.0

    def validate(self, index: int):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"layer {index}: unknown kind {self.kind!r}")
        if self.kind == "conv" and (not self.filters or not self.kernel):
            raise SpecError(f"layer {index}: conv needs filters and kernel")
        if self.kind == "dense" and not self.units:
            raise SpecError(f"layer {index}: dense needs units")
        if self.kind == "dropout" and not (0.0 <= (self.rate or 0.0) < 1.0):
            raise SpecError(f"layer {index}: dropout rate must be in [0,1)")
        if self.kind == "activation" and self.act not in ("relu", "sigmoid"):
            raise SpecError(f"layer {index}: activation must be relu or sigmoid")
        if self.kind == "maxpool" and not self.window:
            raise SpecError(f"layer {index}: maxpool needs a window")
        if self.l2_coefficient and self.kind not in ("conv", "dense"):
            raise SpecError(f"layer {index}: l2 applies only to conv/dense")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None and v != 0.0 or k == "kind"}


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_shape: list[int]  # [C,H,W] for images, [D] for vectors

    def validate(self):
        seen_flatten = False
        for i, layer in enumerate(self.layers):
            layer.validate(i)
            if layer.kind == "dense" and len(self.input_shape) > 1 and not seen_flatten:
                raise SpecError(f"layer {i}: dense requires a preceding flatten")
            if layer.kind == "flatten":
                seen_flatten = True
        self.propagate_shapes()

    def propagate_shapes(self) -> list[tuple[int, ...]]:
        """Static per-layer output shapes (without the batch dimension)."""
        shape = tuple(self.input_shape)
        shapes = []
        for i, layer in enumerate(self.layers):
            k = layer.kind
            if k == "conv":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: conv needs [C,H,W] input, got {shape}")
                c, h, w = shape
                s = layer.stride or 1
                p = layer.padding or 0
                ho = (h + 2 * p - layer.kernel) // s + 1
                wo = (w + 2 * p - layer.kernel) // s + 1
                if ho < 1 or wo < 1:
                    raise SpecError(f"layer {i}: conv output collapses to {ho}x{wo}")
                shape = (layer.filters, ho, wo)
            elif k == "maxpool":
                c, h, w = shape
                s = layer.stride or layer.window
                ho = (h - layer.window) // s + 1
                wo = (w - layer.window) // s + 1
                if ho < 1 or wo < 1:
                    raise SpecError(f"layer {i}: maxpool output collapses to {ho}x{wo}")
                shape = (c, ho, wo)
            elif k == "batchnorm":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: batchnorm needs [C,H,W] input")
            elif k == "flatten":
                shape = (int(np.prod(shape)),)
            elif k == "dense":
                if len(shape) != 1:
                    raise SpecError(f"layer {i}: dense needs flat input, got {shape}")
                shape = (layer.units,)
            elif k == "global_avg_pool":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: global_avg_pool needs [C,H,W] input")
                shape = (shape[0],)
            # dropout / activation keep the shape
            shapes.append(shape)
        return shapes

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        layers = [LayerSpec(**{k: v for k, v in ld.items()}) for ld in d["layers"]]
        return cls(layers=layers, input_shape=list(d["input_shape"]))


@dataclass
class NetworkState:
    spec: NetworkSpec
    parameters: list[dict]  # per layer: {} or {w,b} or {gamma,beta}
    bn_states: list[BatchNormState | None]
    rng_seed: int

    def trainable_tensors(self) -> list[Tensor]:
        out = []
        for p in self.parameters:
            for key in ("w", "b", "gamma", "beta"):
                if key in p:
                    out.append(p[key])
        return out

    def snapshot(self) -> list[np.ndarray]:
        arrays = [t.data.copy() for t in self.trainable_tensors()]
        arrays += [
            a.copy()
            for st in self.bn_states
            if st is not None and st.running_mean is not None
            for a in (st.running_mean, st.running_var)
        ]
        return arrays

    def restore(self, arrays: list[np.ndarray]):
        tensors = self.trainable_tensors()
        for t, a in zip(tensors, arrays):
            t.data[...] = a
        rest = arrays[len(tensors):]
        i = 0
        for st in self.bn_states:
            if st is not None and st.running_mean is not None:
                st.running_mean[...] = rest[i]
                st.running_var[...] = rest[i + 1]
                i += 2


def build_network(spec: NetworkSpec, seed: int) -> NetworkState:
    """Initialize parameters: Glorot-uniform weights, zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: list[dict] = []
    bn_states: list[BatchNormState | None] = []
    shape = tuple(spec.input_shape)
    for layer in spec.layers:
        p: dict = {}
        bn: BatchNormState | None = None
        if layer.kind == "conv":
            c = shape[0]
            f, k = layer.filters, layer.kernel
            fan_in = c * k * k
            fan_out = f * k * k
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            p["w"] = Tensor(
                rng.uniform(-limit, limit, size=(f, c, k, k)), requires_grad=True
            )
            p["b"] = Tensor(np.zeros(f), requires_grad=True)
        elif layer.kind == "dense":
            d = shape[0]
            kk = layer.units
            limit = np.sqrt(6.0 / (d + kk))
            p["w"] = Tensor(rng.uniform(-limit, limit, size=(d, kk)), requires_grad=True)
            p["b"] = Tensor(np.zeros(kk), requires_grad=True)
        elif layer.kind == "batchnorm":
            c = shape[0]
            p["gamma"] = Tensor(np.ones(c), requires_grad=True)
            p["beta"] = Tensor(np.zeros(c), requires_grad=True)
            bn = BatchNormState()
        params.append(p)
        bn_states.append(bn)
        shape = _next_shape(shape, layer)
    return NetworkState(spec=spec, parameters=params, bn_states=bn_states, rng_seed=seed)


def _next_shape(shape, layer):
    tmp = NetworkSpec(layers=[layer], input_shape=list(shape))
    return tmp.propagate_shapes()[0]


def forward(
    state: NetworkState,
    x: Tensor,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    capture: list | None = None,
) -> Tensor:
    """Run a batch through every layer.

    ``capture``, when given, receives each layer's output tensor in
    order (used by the feature-extraction consistency checks).
    """
    out = x
    for layer, p, bn in zip(state.spec.layers, state.parameters, state.bn_states):
        k = layer.kind
        if k == "conv":
            out = T.conv2d(out, p["w"], p["b"], layer.stride or 1, layer.padding or 0)
        elif k == "batchnorm":
            out = T.batchnorm2d(out, p["gamma"], p["beta"], bn, mode=mode)
        elif k == "maxpool":
            out = T.maxpool2d(out, layer.window, layer.stride or layer.window)
        elif k == "flatten":
            out = T.flatten(out)
        elif k == "dense":
            out = T.dense(out, p["w"], p["b"])
        elif k == "dropout":
            if rng is None:
                rng = np.random.default_rng(state.rng_seed)
            out = T.dropout(out, layer.rate, mode, rng)
        elif k == "activation":
            out = T.activation(out, layer.act)
        elif k == "global_avg_pool":
            out = T.global_avg_pool(out)
        if capture is not None:
            capture.append(out)
    return out


def count_parameters(state: NetworkState) -> int:
    """Trainable parameter count (batchnorm running stats excluded)."""
    return sum(int(t.size) for t in state.trainable_tensors())


def extract_features(backbone: NetworkState, image: np.ndarray) -> np.ndarray:
    """Eval-mode embedding of one preprocessed [C,H,W] image."""
    if tuple(image.shape) != tuple(backbone.spec.input_shape):
        raise T.DimensionError(
            f"image shape {image.shape} does not match spec input "
            f"{backbone.spec.input_shape}"
        )
    x = Tensor(image[None, ...])
    out = forward(backbone, x, mode="eval")
    return out.data[0].astype(np.float64)


# -- presets -----------------------------------------------------------


def _conv_block(filters, batchnorm=True, dropout_rate=None, l2=0.0):
    layers = [LayerSpec("conv", filters=filters, kernel=3, stride=1, padding=1, l2_coefficient=l2)]
    if batchnorm:
        layers.append(LayerSpec("batchnorm"))
    layers.append(LayerSpec("activation", act="relu"))
    layers.append(LayerSpec("maxpool", window=2, stride=2))
    if dropout_rate:
        layers.append(LayerSpec("dropout", rate=dropout_rate))
    return layers


def _head(
    conv_filters,
    l2=1e-4,
    dropout_dense=0.3,
    dropout_blocks=None,
    embedding_dim=64,
    dense_units=256,
    input_shape=(3, 64, 64),
):
    layers = []
    for f in conv_filters:
        layers += _conv_block(f, dropout_rate=dropout_blocks, l2=l2)
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("dense", units=dense_units, l2_coefficient=l2))
    layers.append(LayerSpec("activation", act="relu"))
    if dropout_dense:
        layers.append(LayerSpec("dropout", rate=dropout_dense))
    layers.append(LayerSpec("dense", units=embedding_dim, l2_coefficient=l2))
    return NetworkSpec(layers=layers, input_shape=list(input_shape))


PRESET_NAMES = (
    "mini_vgg_backbone",
    "roadscan_head",
    "head_no_regularizer",
    "head_one_block",
    "head_three_blocks",
    "head_dropout_all",
    "head_dense_only",
    "head_2x_filters",
    "head_two_extra_blocks",
)


def preset_spec(name: str, input_shape=(3, 64, 64), embedding_dim=64) -> NetworkSpec:
    """Named architecture presets, including the ablation variants."""
    if name == "mini_vgg_backbone":
        layers = []
        for f in (16, 32, 64):
            layers += [
                LayerSpec("conv", filters=f, kernel=3, stride=1, padding=1),
                LayerSpec("activation", act="relu"),
                LayerSpec("conv", filters=f, kernel=3, stride=1, padding=1),
                LayerSpec("activation", act="relu"),
                LayerSpec("maxpool", window=2, stride=2),
            ]
        layers.append(LayerSpec("global_avg_pool"))
        return NetworkSpec(layers=layers, input_shape=list(input_shape))
    if name == "roadscan_head":
        return _head((32, 64), input_shape=input_shape, embedding_dim=embedding_dim)
    if name == "head_no_regularizer":
        return _head((32, 64), l2=0.0, input_shape=input_shape, embedding_dim=embedding_dim)
    if name == "head_one_block":
        return _head((32,), input_shape=input_shape, embedding_dim=embedding_dim)
    if name == "head_three_blocks":
        return _head((32, 64, 128), input_shape=input_shape, embedding_dim=embedding_dim)
    if name == "head_dropout_all":
        return _head(
            (32, 64), dropout_blocks=0.3, input_shape=input_shape, embedding_dim=embedding_dim
        )
    if name == "head_dense_only":
        layers = [
            LayerSpec("flatten"),
            LayerSpec("dense", units=256, l2_coefficient=1e-4),
            LayerSpec("activation", act="relu"),
            LayerSpec("dropout", rate=0.3),
            LayerSpec("dense", units=embedding_dim, l2_coefficient=1e-4),
        ]
        return NetworkSpec(layers=layers, input_shape=list(input_shape))
    if name == "head_2x_filters":
        return _head(
            (64, 128), l2=0.0, input_shape=input_shape, embedding_dim=embedding_dim
        )
    if name == "head_two_extra_blocks":
        return _head(
            (32, 64, 128, 256), l2=0.0, input_shape=input_shape, embedding_dim=embedding_dim
        )
    raise SpecError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")


# -- Siamese model -----------------------------------------------------


@dataclass
class SiameseModel:
    """Weight-shared embedding network plus the similarity layer.

    Both branches read the same NetworkState, so updating one updates
    both. The similarity layer maps |E(a)-E(b)| through a single
    logistic unit.
    """

    embed: NetworkState
    sim_w: Tensor
    sim_b: Tensor
    threshold: float | None = None
    input_mode: str = "raw"  # preprocessing the embedding expects

    @classmethod
    def create(cls, spec: NetworkSpec, seed: int) -> "SiameseModel":
        state = build_network(spec, seed)
        dim = spec.propagate_shapes()[-1][0]
        rng = np.random.default_rng(seed + 1)
        limit = np.sqrt(6.0 / (dim + 1))
        return cls(
            embed=state,
            sim_w=Tensor(rng.uniform(-limit, limit, size=dim), requires_grad=True),
            sim_b=Tensor(np.zeros(1), requires_grad=True),
        )

    def embedding_dim(self) -> int:
        return int(self.sim_w.size)

    def embed_batch(self, x: Tensor, mode="eval", rng=None) -> Tensor:
        return forward(self.embed, x, mode=mode, rng=rng)

    def similarity_logits(self, ea: Tensor, eb: Tensor) -> Tensor:
        diff = T.absolute(T.sub(ea, eb))
        w = T.reshape(self.sim_w, (self.embedding_dim(), 1))
        return T.dense(diff, w, self.sim_b)


def siamese_forward(model: SiameseModel, a: np.ndarray, b: np.ndarray):
    """Distance and similarity for one input pair (eval mode)."""
    if a.shape != b.shape:
        raise T.DimensionError(f"pair shapes differ: {a.shape} vs {b.shape}")
    batch = Tensor(np.stack([a, b]))
    emb = forward(model.embed, batch, mode="eval")
    ea, eb = emb.data[0].astype(np.float64), emb.data[1].astype(np.float64)
    distance = float(np.sqrt(np.sum((ea - eb) ** 2)))
    logit = float(np.abs(ea - eb) @ model.sim_w.data.astype(np.float64) + model.sim_b.data[0])
    similarity = 1.0 / (1.0 + np.exp(-logit))
    return distance, similarity


# -- persistence -------------------------------------------------------


def _state_dict_arrays(model: SiameseModel) -> list[np.ndarray]:
    arrays = [t.data for t in model.embed.trainable_tensors()]
    arrays += [model.sim_w.data, model.sim_b.data]
    for st in model.embed.bn_states:
        if st is not None:
            if st.running_mean is None:
                raise CheckpointError(
                    "cannot save a batchnorm network before its running stats exist"
                )
            arrays += [st.running_mean, st.running_var]
    return arrays


def save_checkpoint(model: SiameseModel, path) -> None:
    """Binary checkpoint: RSCK magic, version, JSON spec, float32 tensors."""
    meta = model.embed.spec.to_dict()
    meta["rng_seed"] = model.embed.rng_seed
    meta["similarity"] = True
    meta["input_mode"] = model.input_mode
    if model.threshold is not None:
        meta["threshold"] = model.threshold
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in _state_dict_arrays(model):
            flat = np.ascontiguousarray(arr, dtype=np.float32).ravel()
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())


def load_checkpoint(path) -> SiameseModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (jlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + jlen > len(data):
        raise CheckpointError("truncated checkpoint: JSON spec cut short")
    try:
        meta = json.loads(data[16 : 16 + jlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt spec JSON: {e}") from None
    spec = NetworkSpec.from_dict(meta)
    model = SiameseModel.create(spec, seed=int(meta.get("rng_seed", 0)))
    model.threshold = meta.get("threshold")
    model.input_mode = meta.get("input_mode", "raw")

    pos = 16 + jlen
    arrays = []
    while pos < len(data):
        if pos + 8 > len(data):
            raise CheckpointError("truncated checkpoint: tensor header cut short")
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        nbytes = count * 4
        if pos + nbytes > len(data):
            raise CheckpointError("truncated checkpoint: tensor payload cut short")
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=pos))
        pos += nbytes

    trainables = model.embed.trainable_tensors() + [model.sim_w, model.sim_b]
    n_bn = sum(1 for st in model.embed.bn_states if st is not None)
    expected = len(trainables) + 2 * n_bn
    if len(arrays) != expected:
        raise CheckpointError(
            f"checkpoint holds {len(arrays)} tensors, spec requires {expected}"
        )
    for t, a in zip(trainables, arrays):
        if a.size != t.size:
            raise CheckpointError(
                f"tensor length {a.size} disagrees with spec shape {t.shape}"
            )
        t.data[...] = a.reshape(t.shape)
    rest = arrays[len(trainables):]
    i = 0
    for st in model.embed.bn_states:
        if st is not None:
            st.running_mean = rest[i].astype(np.float64).copy()
            st.running_var = rest[i + 1].astype(np.float64).copy()
            i += 2
    return model


# -- embedding CSV -----------------------------------------------------


def export_embeddings(records, path) -> None:
    """Write (id, label, vector) records as CSV with header id,label,e0..."""
    records = list(records)
    if not records:
        with open(path, "w") as fh:
            fh.write("id,label\n")
        return
    dim = len(records[0][2])
    with open(path, "w") as fh:
        fh.write("id,label," + ",".join(f"e{i}" for i in range(dim)) + "\n")
        for rid, label, vec in records:
            fh.write(f"{rid},{label}," + ",".join(repr(float(v)) for v in vec) + "\n")


def import_embeddings(path) -> list[tuple[str, str, np.ndarray]]:
    """Read the embedding CSV; validates dimensions, ids and numerics."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        return []
    header = lines[0].split(",")
    if header[:2] != ["id", "label"]:
        raise ParseError("line 1: header must start with id,label")
    dim = len(header) - 2
    seen = set()
    out = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != dim + 2:
            raise ParseError(
                f"line {lineno}: expected {dim + 2} fields, got {len(parts)}"
            )
        rid, label = parts[0], parts[1]
        if rid in seen:
            raise ParseError(f"line {lineno}: duplicate id {rid!r}")
        seen.add(rid)
        try:
            vec = np.array([float(v) for v in parts[2:]], dtype=np.float64)
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric embedding field") from None
        if not np.all(np.isfinite(vec)):
            raise ParseError(f"line {lineno}: non-finite embedding value")
        out.append((rid, label, vec))
    return out
