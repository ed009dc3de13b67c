"""Desk-scale image and text classifiers with named, re-randomizable layers.

The image model is a small conv net (conv blocks of conv/activation/pool, then
two dense layers); the text model is a tiny transformer encoder classifier
(token + learned positional embeddings, self-attention blocks, a first-token
pooler with a dense+tanh head, linear classifier). Both expose their parameters as
named groups ordered bottom to top, so individual layers can be re-randomized
in isolation, and both come in smooth variants: relu can be swapped for
softplus and max pooling for log-sum-exp pooling without touching parameters.

Models are immutable after construction. Operations that "modify" a model
(re-randomizing a layer, swapping activations) return new Model values that
share the untouched parameter tensors.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from saliency_audit.seeds import rng_for
from saliency_audit.tensor import Graph, Tensor, forward, grad, value_and_grad

__all__ = [
    "ModelConfig",
    "Model",
    "ModelError",
    "TrainedModel",
    "TrainingConfig",
    "TrainingDiverged",
    "ModelView",
    "build_model",
    "predict",
    "embed_tokens",
    "model_view",
    "train",
    "accuracy",
    "xavier_reinit",
    "with_variant",
    "replace_params",
    "function_slice",
    "slice_curves",
    "default_baseline",
    "save_model",
    "load_model",
]

CHECKPOINT_MAGIC = b"SALCKPT1"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and variant selection for both tasks.

    Image inputs are (in_channels, image_size, image_size) pixel tensors in
    [0, 1]; text inputs are padded token-id sequences of length max_len.
    """

    task: str
    num_classes: int = 10
    seed: int = 0
    activation: str = "relu"          # "relu" | "softplus"
    softplus_beta: float = 1.0
    pooling: str = "maxpool"          # "maxpool" | "lsepool" (image only)
    lse_temperature: float = 10.0
    # image
    in_channels: int = 1
    image_size: int = 28
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    fc_units: int = 32
    # text
    vocab_size: int = 0
    embed_dim: int = 32
    num_encoder_layers: int = 2
    num_heads: int = 4
    ff_units: int = 64
    max_len: int = 16
    pad_id: int = 0
    start_id: int | None = None      # reserved first-position token, if any

    def __post_init__(self):
        if self.task not in ("image", "text"):
            raise ModelError(f"unknown task '{self.task}'")
        if self.num_classes < 2:
            raise ModelError("num_classes must be at least 2")
        if self.activation not in ("relu", "softplus"):
            raise ModelError(f"unknown activation '{self.activation}'")
        if self.pooling not in ("maxpool", "lsepool"):
            raise ModelError(f"unknown pooling '{self.pooling}'")
        if self.softplus_beta <= 0 or self.lse_temperature <= 0:
            raise ModelError("softplus_beta and lse_temperature must be positive")
        if self.task == "image":
            factor = 2 ** len(self.conv_channels)
            if self.image_size % factor:
                raise ModelError(f"image_size {self.image_size} not divisible by pooling factor {factor}")
            if self.kernel_size % 2 == 0 or self.kernel_size < 1:
                raise ModelError("kernel_size must be odd and positive")
            if not self.conv_channels:
                raise ModelError("need at least one conv block")
        else:
            if self.vocab_size < 2:
                raise ModelError("text models need vocab_size >= 2")
            if self.num_encoder_layers < 1:
                raise ModelError("need at least one encoder layer")
            if self.embed_dim % self.num_heads:
                raise ModelError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
            if not (0 <= self.pad_id < self.vocab_size):
                raise ModelError("pad_id outside vocabulary")
            if self.start_id is not None and not (0 <= self.start_id < self.vocab_size):
                raise ModelError("start_id outside vocabulary")


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    layers: list[tuple[str, list[str]]]        # bottom -> top parameter groups
    graph: Graph                               # task input (+"target") -> logits, loss
    embed_graph: Graph | None = None           # text only: "embedded" -> logits

    @property
    def input_name(self) -> str:
        return "x" if self.config.task == "image" else "token_ids"

    @property
    def layer_names(self) -> list[str]:
        return [name for name, _ in self.layers]

    def bindings(self, **extra) -> dict:
        merged = dict(self.params)
        merged.update(extra)
        return merged


@dataclass
class TrainedModel:
    model: Model
    history: list[dict]
    test_accuracy: float


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    optimizer: str = "adam"   # "adam" | "sgd"
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ModelError(f"unknown optimizer '{self.optimizer}'")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ModelError("bad training hyperparameters")


# ---------------------------------------------------------------------------
# graph construction


def _act(g: Graph, cfg: ModelConfig, node):
    if cfg.activation == "relu":
        return g.relu(node)
    return g.softplus(node, beta=cfg.softplus_beta)


def _pool(g: Graph, cfg: ModelConfig, node):
    if cfg.pooling == "maxpool":
        return g.maxpool2d(node, 2)
    return g.lsepool2d(node, 2, t=cfg.lse_temperature)


def _build_image(cfg: ModelConfig):
    g = Graph()
    x = g.leaf("x", (cfg.in_channels, cfg.image_size, cfg.image_size))
    specs: list[tuple[str, tuple[int, ...], str]] = []
    layers: list[tuple[str, list[str]]] = []

    h = x
    c_prev = cfg.in_channels
    k = cfg.kernel_size
    for i, c in enumerate(cfg.conv_channels, start=1):
        wn, bn = f"conv{i}.w", f"conv{i}.b"
        w = g.leaf(wn, (c, c_prev, k, k))
        b = g.leaf(bn, (c,))
        specs += [(wn, (c, c_prev, k, k), "weight"), (bn, (c,), "bias")]
        layers.append((f"conv{i}", [wn, bn]))
        h = g.conv2d(h, w, stride=1, padding=k // 2)
        h = g.add(h, g.reshape(b, (c, 1, 1)))
        h = _pool(g, cfg, _act(g, cfg, h))
        c_prev = c

    side = cfg.image_size // (2 ** len(cfg.conv_channels))
    feat = c_prev * side * side
    h = g.reshape(h, (1, feat))
    w1 = g.leaf("fc1.w", (feat, cfg.fc_units))
    b1 = g.leaf("fc1.b", (cfg.fc_units,))
    specs += [("fc1.w", (feat, cfg.fc_units), "weight"), ("fc1.b", (cfg.fc_units,), "bias")]
    layers.append(("fc1", ["fc1.w", "fc1.b"]))
    h = _act(g, cfg, g.add(g.matmul(h, w1), b1))

    w2 = g.leaf("logits.w", (cfg.fc_units, cfg.num_classes))
    b2 = g.leaf("logits.b", (cfg.num_classes,))
    specs += [
        ("logits.w", (cfg.fc_units, cfg.num_classes), "weight"),
        ("logits.b", (cfg.num_classes,), "bias"),
    ]
    layers.append(("logits", ["logits.w", "logits.b"]))
    logits = g.reshape(g.add(g.matmul(h, w2), b2), (cfg.num_classes,))
    g.output("logits", logits)

    target = g.leaf("target", (cfg.num_classes,))
    g.output("loss", g.cross_entropy(logits, target))
    return g, None, specs, layers


def _encoder_stack(g: Graph, x, cfg: ModelConfig, declare):
    """Shared encoder/pooler/classifier wiring; ``declare`` creates param leaves."""
    L, d, C = cfg.max_len, cfg.embed_dim, cfg.num_classes
    heads, dh = cfg.num_heads, cfg.embed_dim // cfg.num_heads

    for layer in range(1, cfg.num_encoder_layers + 1):
        p = f"encoder.layer.{layer}."
        wq, bq = declare(p + "attn.q.w", (d, d), "weight"), declare(p + "attn.q.b", (d,), "bias")
        wk, bk = declare(p + "attn.k.w", (d, d), "weight"), declare(p + "attn.k.b", (d,), "bias")
        wv, bv = declare(p + "attn.v.w", (d, d), "weight"), declare(p + "attn.v.b", (d,), "bias")
        wo, bo = declare(p + "attn.out.w", (d, d), "weight"), declare(p + "attn.out.b", (d,), "bias")

        q = g.add(g.matmul(x, wq), bq)
        kk = g.add(g.matmul(x, wk), bk)
        v = g.add(g.matmul(x, wv), bv)
        qh = g.transpose(g.reshape(q, (L, heads, dh)), (1, 0, 2))
        kh = g.transpose(g.reshape(kk, (L, heads, dh)), (1, 2, 0))
        vh = g.transpose(g.reshape(v, (L, heads, dh)), (1, 0, 2))
        att = g.softmax(g.scale(g.matmul(qh, kh), 1.0 / math.sqrt(dh)), axis=-1)
        ctx = g.reshape(g.transpose(g.matmul(att, vh), (1, 0, 2)), (L, d))
        attn_out = g.add(g.matmul(ctx, wo), bo)

        ln1g = declare(p + "ln1.gain", (d,), "gain")
        ln1b = declare(p + "ln1.bias", (d,), "bias")
        x = g.layer_norm(g.add(x, attn_out), ln1g, ln1b)

        w1 = declare(p + "ff.w1", (d, cfg.ff_units), "weight")
        b1 = declare(p + "ff.b1", (cfg.ff_units,), "bias")
        w2 = declare(p + "ff.w2", (cfg.ff_units, d), "weight")
        b2 = declare(p + "ff.b2", (d,), "bias")
        ff = g.add(g.matmul(_act(g, cfg, g.add(g.matmul(x, w1), b1)), w2), b2)

        ln2g = declare(p + "ln2.gain", (d,), "gain")
        ln2b = declare(p + "ln2.bias", (d,), "bias")
        x = g.layer_norm(g.add(x, ff), ln2g, ln2b)

    # pool from the first position's hidden state; pooling by averaging would
    # leave a token-uniform gradient component (through the residual path)
    # that dominates aggregated token scores for every readout direction
    pooled = g.reshape(g.gather_rows(x, g.const([0.0], name="pool_index")), (d,))
    pw = declare("pooler.w", (d, d), "weight")
    pb = declare("pooler.b", (d,), "bias")
    pooled = g.tanh(g.add(g.matmul(pooled, pw), pb))

    cw = declare("classifier.w", (d, C), "weight")
    cb = declare("classifier.b", (C,), "bias")
    return g.add(g.matmul(pooled, cw), cb)


def _build_text(cfg: ModelConfig):
    L, d = cfg.max_len, cfg.embed_dim
    specs: list[tuple[str, tuple[int, ...], str]] = []
    seen: set[str] = set()

    def declarer(g: Graph):
        def declare(name, shape, kind):
            if name not in seen:
                seen.add(name)
                specs.append((name, shape, kind))
            return g.leaf(name, shape)

        return declare

    g1 = Graph()
    dec1 = declarer(g1)
    ids = g1.leaf("token_ids", (L,))
    tok_table = dec1("embedding.token", (cfg.vocab_size, d), "weight")
    pos_table = dec1("embedding.pos", (L, d), "weight")
    emb = g1.add(g1.gather_rows(tok_table, ids), pos_table)
    # embeddings are layer-normalized before entering the encoder; the
    # attribution domain stays the raw token+position sum
    emb = g1.layer_norm(emb, dec1("embedding.ln.gain", (d,), "gain"),
                        dec1("embedding.ln.bias", (d,), "bias"))
    logits = _encoder_stack(g1, emb, cfg, dec1)
    g1.output("logits", logits)
    target = g1.leaf("target", (cfg.num_classes,))
    g1.output("loss", g1.cross_entropy(logits, target))

    # twin graph entered at the embedding matrix; shares every param name
    g2 = Graph()
    dec2 = declarer(g2)
    embedded = g2.leaf("embedded", (L, d))
    emb2 = g2.layer_norm(embedded, dec2("embedding.ln.gain", (d,), "gain"),
                         dec2("embedding.ln.bias", (d,), "bias"))
    g2.output("logits", _encoder_stack(g2, emb2, cfg, dec2))

    layers: list[tuple[str, list[str]]] = [
        ("embedding", ["embedding.token", "embedding.pos", "embedding.ln.gain", "embedding.ln.bias"])
    ]
    for layer in range(1, cfg.num_encoder_layers + 1):
        p = f"encoder.layer.{layer}."
        layers.append((p[:-1], [n for n, _, _ in specs if n.startswith(p)]))
    layers.append(("pooler", ["pooler.w", "pooler.b"]))
    layers.append(("classifier", ["classifier.w", "classifier.b"]))
    return g1, g2, specs, layers


def _xavier_bound(name: str, shape: tuple[int, ...]) -> float:
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        fan_out = shape[0] * shape[2] * shape[3]
    elif len(shape) == 2:
        fan_in, fan_out = shape[0], shape[1]
    else:
        fan_in = fan_out = shape[0]
    return math.sqrt(6.0 / (fan_in + fan_out))


def _init_params(cfg: ModelConfig, specs) -> dict[str, Tensor]:
    params = {}
    for name, shape, kind in specs:
        if kind == "bias":
            params[name] = Tensor.zeros(shape)
        elif kind == "gain":
            params[name] = Tensor.full(shape, 1.0)
        else:
            bound = _xavier_bound(name, shape)
            rng = rng_for(cfg.seed, "init", name)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    return params


def build_model(config: ModelConfig) -> Model:
    """Construct a model with Xavier/Glorot-uniform weights from config.seed."""
    builder = _build_image if config.task == "image" else _build_text
    graph, embed_graph, specs, layers = builder(config)
    return Model(config, _init_params(config, specs), layers, graph, embed_graph)


def with_variant(model: Model, activation: str | None = None, pooling: str | None = None,
                 softplus_beta: float | None = None, lse_temperature: float | None = None) -> Model:
    """Sibling model with swapped activation/pooling operators.

    The returned model shares the original parameter tensors; only the graph
    differs.
    """
    updates = {}
    if activation is not None:
        updates["activation"] = activation
    if pooling is not None:
        updates["pooling"] = pooling
    if softplus_beta is not None:
        updates["softplus_beta"] = softplus_beta
    if lse_temperature is not None:
        updates["lse_temperature"] = lse_temperature
    cfg = dataclasses.replace(model.config, **updates)
    builder = _build_image if cfg.task == "image" else _build_text
    graph, embed_graph, _, layers = builder(cfg)
    return Model(cfg, dict(model.params), layers, graph, embed_graph)


def replace_params(model: Model, updates: dict[str, Tensor]) -> Model:
    """Copy of the model with some parameter tensors replaced."""
    params = dict(model.params)
    for name, value in updates.items():
        if name not in params:
            raise ModelError(f"unknown parameter '{name}'")
        if value.shape != params[name].shape:
            raise ModelError(f"parameter '{name}' expects shape {params[name].shape}, got {value.shape}")
        params[name] = value
    return Model(model.config, params, model.layers, model.graph, model.embed_graph)


# ---------------------------------------------------------------------------
# evaluation


def _check_input(model: Model, x: Tensor) -> None:
    cfg = model.config
    if cfg.task == "image":
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.shape != want:
            raise ModelError(f"image input must have shape {want}, got {x.shape}")
    else:
        if x.shape != (cfg.max_len,):
            raise ModelError(f"token input must have shape ({cfg.max_len},), got {x.shape}")
        ids = x.array
        if not np.all(ids == np.rint(ids)):
            raise ModelError("token ids must be integral")
        if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
            raise ModelError(f"token id outside vocabulary [0, {cfg.vocab_size})")


def predict(model: Model, x: Tensor) -> Tensor:
    """Logits for one input; a pure function of (model, x)."""
    _check_input(model, x)
    bind = model.bindings(**{model.input_name: x})
    return forward(model.graph, bind, outputs=["logits"])["logits"]


def embed_tokens(model: Model, ids: Tensor) -> Tensor:
    """Token + positional embedding matrix (max_len, embed_dim) for a sequence."""
    if model.config.task != "text":
        raise ModelError("embed_tokens applies to text models")
    _check_input(model, ids)
    idx = np.rint(ids.array).astype(np.int64)
    return Tensor(model.params["embedding.token"].array[idx] + model.params["embedding.pos"].array)


def default_baseline(model: Model) -> Tensor:
    """All-zero image, or the all-pad token sequence for text.

    When the model reserves a start token, the baseline keeps it at position
    0, so the pooled slot contributes no input-difference signal.
    """
    cfg = model.config
    if cfg.task == "image":
        return Tensor.zeros((cfg.in_channels, cfg.image_size, cfg.image_size))
    ids = np.full(cfg.max_len, float(cfg.pad_id))
    if cfg.start_id is not None:
        ids[0] = float(cfg.start_id)
    return Tensor(ids)


@dataclass
class ModelView:
    """A model pinned to its continuous attribution domain.

    For images the domain is the pixel tensor itself; for text it is the
    combined token+positional embedding matrix, evaluated through the
    embedding-entry twin graph.
    """

    task: str
    graph: Graph
    leaf: str
    params: dict[str, Tensor]
    x: np.ndarray        # continuous-domain input
    baseline: np.ndarray

    def _bind(self, z: np.ndarray) -> dict:
        bind = dict(self.params)
        bind[self.leaf] = Tensor(z)
        return bind

    def logits(self, z: np.ndarray) -> np.ndarray:
        return forward(self.graph, self._bind(z), outputs=["logits"])["logits"].array

    def logit(self, z: np.ndarray, target: int) -> float:
        return float(self.logits(z)[target])

    def gradient(self, z: np.ndarray, target: int, guided: bool = False) -> np.ndarray:
        return grad(
            self.graph, self._bind(z), wrt=[self.leaf],
            output="logits", index=target, guided_relu=guided,
        )[self.leaf].array


def model_view(model: Model, x: Tensor, baseline: Tensor | None = None) -> ModelView:
    """Continuous-domain view of (model, input, baseline) for explainers/metrics."""
    if baseline is None:
        baseline = default_baseline(model)
    if baseline.shape != x.shape:
        raise ModelError(f"baseline shape {baseline.shape} does not match input {x.shape}")
    _check_input(model, x)
    if model.config.task == "image":
        return ModelView("image", model.graph, "x", model.params, x.array, baseline.array)
    return ModelView(
        "text", model.embed_graph, "embedded", model.params,
        embed_tokens(model, x).array, embed_tokens(model, baseline).array,
    )


# ---------------------------------------------------------------------------
# training


class _Optimizer:
    def __init__(self, cfg: TrainingConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        for name, g in grads.items():
            if cfg.optimizer == "sgd":
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * params[name]
                params[name] -= cfg.lr * g
            else:
                # decoupled decay; plain L2 would be swallowed by the rescaling
                b1, b2, eps = 0.9, 0.999, 1e-8
                self.m[name] = b1 * self.m[name] + (1 - b1) * g
                self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
                mhat = self.m[name] / (1 - b1**self.t)
                vhat = self.v[name] / (1 - b2**self.t)
                params[name] -= cfg.lr * (mhat / (np.sqrt(vhat) + eps) + cfg.weight_decay * params[name])


def _onehot(label: int, num_classes: int) -> Tensor:
    v = np.zeros(num_classes, dtype=np.float64)
    v[label] = 1.0
    return Tensor(v)


def train(config: ModelConfig, dataset, hyper: TrainingConfig) -> TrainedModel:
    """Train a freshly built model; deterministic given (config.seed, hyper.seed)."""
    items = dataset.train
    if not items:
        raise ModelError("dataset has no training items")
    for _, label in items:
        if not (0 <= label < config.num_classes):
            raise ModelError(f"label {label} outside [0, {config.num_classes})")

    model = build_model(config)
    params = {name: np.array(t.array) for name, t in model.params.items()}
    names = list(params)
    opt = _Optimizer(hyper, params)
    input_name = model.input_name
    history = []

    for epoch in range(hyper.epochs):
        order = rng_for(hyper.seed, "shuffle", epoch).permutation(len(items))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            acc_grads = {name: np.zeros_like(params[name]) for name in names}
            for idx in batch:
                x, label = items[idx]
                bind = dict(params)
                bind[input_name] = x
                bind["target"] = _onehot(label, config.num_classes)
                outs, grads = value_and_grad(model.graph, bind, wrt=names, output="loss")
                loss = outs["loss"].item()
                if not math.isfinite(loss):
                    raise TrainingDiverged(epoch)
                total_loss += loss
                correct += int(np.argmax(outs["logits"].array) == label)
                for name in names:
                    acc_grads[name] += grads[name].array
            scale = 1.0 / len(batch)
            opt.step(params, {name: acc_grads[name] * scale for name in names})
        history.append({
            "epoch": epoch,
            "loss": total_loss / len(items),
            "accuracy": correct / len(items),
        })

    trained = replace_params(model, {name: Tensor(arr) for name, arr in params.items()})
    test_acc = accuracy(trained, dataset.test) if dataset.test else float("nan")
    return TrainedModel(trained, history, test_acc)


def accuracy(model: Model, items) -> float:
    if not items:
        raise ModelError("empty evaluation set")
    correct = sum(int(np.argmax(predict(model, x).array) == label) for x, label in items)
    return correct / len(items)


# ---------------------------------------------------------------------------
# layer randomization and slicing


def xavier_reinit(model: Model, layer_name: str, seed: int) -> Model:
    """Copy of the model with one layer group re-randomized.

    Weights (and layer-norm gains) are resampled uniform within the Glorot
    bound sqrt(6/(fan_in+fan_out)); biases are zeroed. Everything outside the
    group is shared bitwise with the original.
    """
    groups = dict(model.layers)
    if layer_name not in groups:
        raise ModelError(f"unknown layer '{layer_name}'; expected one of {model.layer_names}")
    updates = {}
    specs = {name: model.params[name].shape for name in groups[layer_name]}
    for name, shape in specs.items():
        if name.endswith((".b", ".bias")) or name == "bias":
            updates[name] = Tensor.zeros(shape)
        else:
            bound = _xavier_bound(name, shape)
            rng = rng_for(seed, "reinit", name)
            updates[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    return replace_params(model, updates)


def slice_curves(f, x: np.ndarray, dims, lo: float, hi: float, samples: int):
    """Evaluate ``f`` along axis-aligned 1-D slices through x.

    Returns one [(offset, value), ...] list per requested flat dimension.
    """
    if samples < 2:
        raise ModelError("need at least two samples per slice")
    size = x.size
    for dim in dims:
        if not (0 <= dim < size):
            raise ModelError(f"slice dim {dim} outside input of size {size}")
    offsets = np.linspace(lo, hi, samples)
    curves = []
    for dim in dims:
        pts = []
        for off in offsets:
            xp = np.array(x)
            xp.reshape(-1)[dim] += off
            pts.append((float(off), float(f(xp))))
        curves.append(pts)
    return curves


def default_slice_dims(x: np.ndarray, count: int = 5) -> list[int]:
    """The ``count`` flat input dims with largest magnitude (ties by index)."""
    order = np.argsort(-np.abs(x.reshape(-1)), kind="stable")
    return [int(i) for i in order[:count]]


def function_slice(model: Model, x: Tensor, dims=None, value_range=(-1.0, 1.0),
                   samples: int = 41, target: int = 0):
    """Target-logit curves along selected input dimensions.

    For text models the slices run through the embedding matrix (the model's
    continuous domain). Defaults to the five largest-magnitude input dims.
    """
    view = model_view(model, x)
    if dims is None:
        dims = default_slice_dims(view.x)
    lo, hi = float(value_range[0]), float(value_range[1])
    return slice_curves(lambda z: view.logit(z, target), view.x, dims, lo, hi, samples)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: Model, path) -> None:
    """Single-container checkpoint: JSON header + raw little-endian float64 buffers."""
    cfg = dataclasses.asdict(model.config)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg,
        "layers": [[name, list(group)] for name, group in model.layers],
        "params": [{"name": name, "shape": list(model.params[name].shape)} for name in model.params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for entry in header["params"]:
            arr = model.params[entry["name"]].array
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"not a model checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {header.get('format_version')}")
        cfg_dict = dict(header["config"])
        cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
        config = ModelConfig(**cfg_dict)
        model = build_model(config)
        updates = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ModelError(f"checkpoint truncated while reading '{entry['name']}'")
            updates[entry["name"]] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape))
        return replace_params(model, updates)
