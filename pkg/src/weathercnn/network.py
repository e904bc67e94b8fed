"""Network assembly, SGD training, evaluation and model files.

A network is a straight chain of layers ending in a 2-unit fully connected
layer with logistic outputs. Class index 0 means "event present".
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .binio import Reader, Writer
from .errors import ConfigError, FormatError, ShapeError, ValidationError
from .events import EventKind
from .layers import (
    ActivationSpec,
    Conv2D,
    ConvSpec,
    Dense,
    FcSpec,
    Logistic,
    MaxPool2D,
    PoolSpec,
    ReLU,
    cross_entropy_loss,
    conv2d_valid,
    cross_entropy_per_sample,
)
from .numerics import DTYPE, Rng, as_tensor

log = logging.getLogger(__name__)

MODEL_MAGIC = b"CNNM"
MODEL_VERSION = 1
NUM_CLASSES = 2
EVAL_BATCH = 64

LayerSpec = ConvSpec | PoolSpec | FcSpec | ActivationSpec


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple
    input_dims: tuple[int, int, int]
    preset: str = "Custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if len(self.input_dims) != 3:
            raise ConfigError(f"input_dims must be (channels, height, width), got {self.input_dims}")

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "input_dims": list(self.input_dims),
            "layers": [_spec_to_str(s) for s in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            layers = [parse_layer_spec(s) for s in d["layers"]]
            return cls(layers, tuple(d["input_dims"]), d.get("preset", "Custom"))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed network config: {exc}") from None


def _spec_to_str(spec) -> str:
    if isinstance(spec, ConvSpec):
        return f"conv {spec.label()}"
    if isinstance(spec, PoolSpec):
        return f"pool {spec.label()}"
    if isinstance(spec, FcSpec):
        return f"fc {spec.num_units}"
    return spec.kind


_CONV_RE = re.compile(r"^conv\s*(\d+)x(\d+)-(\d+)$")
_POOL_RE = re.compile(r"^pool\s*(\d+)x(\d+)$")
_FC_RE = re.compile(r"^fc\s*(\d+)$")


def parse_layer_spec(item) -> LayerSpec:
    """Parse a layer written as ``"conv 5x5-8"``, ``"pool 2x2"``, ``"fc 50"``,
    ``"relu"``, ``"logistic"``, or the equivalent mapping form
    (``{"type": "conv", "filter": [5, 5], "filters": 8}``)."""
    if isinstance(item, (ConvSpec, PoolSpec, FcSpec, ActivationSpec)):
        return item
    try:
        if isinstance(item, dict):
            kind = item["type"].lower()
            if kind == "conv":
                fh, fw = item["filter"]
                return ConvSpec(int(fh), int(fw), int(item["filters"]))
            if kind == "pool":
                s, t = item["window"]
                return PoolSpec(int(s), int(t))
            if kind == "fc":
                return FcSpec(int(item["units"]))
            return ActivationSpec(kind)
        text = " ".join(str(item).lower().split())
        if m := _CONV_RE.match(text):
            return ConvSpec(int(m[1]), int(m[2]), int(m[3]))
        if m := _POOL_RE.match(text):
            return PoolSpec(int(m[1]), int(m[2]))
        if m := _FC_RE.match(text):
            return FcSpec(int(m[1]))
        return ActivationSpec(text)
    except (KeyError, ValueError, TypeError, ShapeError) as exc:
        raise ConfigError(f"cannot parse layer spec {item!r}: {exc}") from None


def table_config(conv1, pool1, conv2, pool2, hidden, input_dims, preset="Custom") -> NetworkConfig:
    """Two conv/pool stages and two fully connected layers, ReLU after every
    conv and the hidden fc, logistic on the 2-unit output."""
    return NetworkConfig(
        [conv1, ActivationSpec("relu"), pool1,
         conv2, ActivationSpec("relu"), pool2,
         FcSpec(hidden), ActivationSpec("relu"),
         FcSpec(NUM_CLASSES), ActivationSpec("logistic")],
        input_dims,
        preset,
    )


def preset_config(event) -> NetworkConfig:
    """Architecture used for ``event`` with the matching patch dimensions."""
    event = EventKind.parse(event)
    if event is EventKind.AR:
        stages = (ConvSpec(12, 12, 8), PoolSpec(3, 3), ConvSpec(12, 12, 16), PoolSpec(2, 2), 200)
    else:
        stages = (ConvSpec(5, 5, 8), PoolSpec(2, 2), ConvSpec(5, 5, 16), PoolSpec(2, 2), 50)
    return table_config(*stages, input_dims=event.dims, preset=event.title)


def load_config(path) -> NetworkConfig:
    """Read a network config from a YAML (or JSON) file.

    The file either names a preset (``preset: tc``) or spells out
    ``input_dims`` and ``layers``.
    """
    import yaml

    with open(path, encoding="utf-8") as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    if "layers" not in d and "preset" in d:
        return preset_config(d["preset"])
    return NetworkConfig.from_dict(d)


@dataclass(frozen=True)
class ShapeStep:
    index: int
    kind: str
    label: str
    in_dims: tuple
    out_dims: tuple


def infer_shapes(config: NetworkConfig) -> list[ShapeStep]:
    """Propagate dimensions through ``config`` (valid conv, floor pooling).

    Raises :class:`ConfigError` naming the first layer whose output would have
    a non-positive extent, or when the head is not a 2-unit logistic layer.
    """
    dims = config.input_dims
    if any(d < 1 for d in dims):
        raise ConfigError(f"input dims must be positive, got {dims}")
    steps = []
    for i, spec in enumerate(config.layers):
        name = f"layer {i} ({_spec_to_str(spec)})"
        if isinstance(spec, ConvSpec):
            if len(dims) != 3:
                raise ConfigError(f"{name}: convolution needs an image input, got {dims}")
            out = (spec.num_filters, dims[1] - spec.filter_height + 1, dims[2] - spec.filter_width + 1)
            kind = "conv"
        elif isinstance(spec, PoolSpec):
            if len(dims) != 3:
                raise ConfigError(f"{name}: pooling needs an image input, got {dims}")
            out = (dims[0], dims[1] // spec.window_height, dims[2] // spec.window_width)
            kind = "pool"
        elif isinstance(spec, FcSpec):
            out = (spec.num_units,)
            kind = "fc"
        elif isinstance(spec, ActivationSpec):
            out = dims
            kind = spec.kind
        else:
            raise ConfigError(f"{name}: unknown layer spec {spec!r}")
        if any(d < 1 for d in out):
            raise ConfigError(f"{name}: output dims {out} have a non-positive extent (input {dims})")
        steps.append(ShapeStep(i, kind, _spec_to_str(spec), dims, out))
        dims = out
    if (len(steps) < 2 or steps[-1].kind != "logistic" or steps[-2].kind != "fc"
            or steps[-2].out_dims != (NUM_CLASSES,)):
        raise ConfigError("network must end with a 2-unit fc layer followed by logistic")
    return steps


# -- network -------------------------------------------------------------------

class Network:
    """An instantiated chain of layers."""

    def __init__(self, config: NetworkConfig, layers: list, conv_method: str = "auto"):
        self.config = config
        self.layers = layers
        self.conv_method = conv_method
        # free-form JSON-compatible annotations saved with the model
        # (e.g. the input normalisation the network was trained under)
        self.metadata: dict = {}

    @classmethod
    def from_config(cls, config: NetworkConfig, conv_method: str = "auto") -> "Network":
        """Zero-initialised network (all weights and biases 0)."""
        steps = infer_shapes(config)
        layers = []
        for spec, step in zip(config.layers, steps):
            if isinstance(spec, ConvSpec):
                layers.append(Conv2D(spec, step.in_dims[0], method=conv_method))
            elif isinstance(spec, PoolSpec):
                layers.append(MaxPool2D(spec))
            elif isinstance(spec, FcSpec):
                layers.append(Dense(spec, int(np.prod(step.in_dims))))
            elif spec.kind == "relu":
                layers.append(ReLU())
            else:
                layers.append(Logistic())
        return cls(config, layers, conv_method)

    @property
    def learnable_layers(self) -> list:
        return [layer for layer in self.layers if layer.params]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def named_parameters(self):
        """Yield ``(layer_index, name, array)`` in layer order (weight before bias)."""
        for i, layer in enumerate(self.layers):
            for name in ("weight", "bias"):
                if name in layer.params:
                    yield i, name, layer.params[name]

    def copy(self) -> "Network":
        net = Network.from_config(self.config, self.conv_method)
        for (_, _, dst), (_, _, src) in zip(net.named_parameters(), self.named_parameters()):
            dst[...] = src
        net.metadata = json.loads(json.dumps(self.metadata))
        return net

    def _check_input(self, x):
        x = as_tensor(x)
        dims = self.config.input_dims
        if x.shape[-3:] != dims or x.ndim not in (3, 4):
            raise ShapeError(f"input shape {x.shape} does not match network input dims {dims}")
        return x

    def forward_batch(self, x) -> np.ndarray:
        """Class probabilities ``(N, 2)`` for a batch ``(N, p, m, n)``."""
        out = self._check_input(x)
        if out.ndim == 3:
            out = out[None]
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def forward(self, patch) -> np.ndarray:
        """Class probabilities ``(2,)`` for one patch ``(p, m, n)``; both lie in (0, 1)."""
        patch = self._check_input(patch)
        if patch.ndim != 3:
            raise ShapeError(f"forward expects a single patch, got shape {patch.shape}")
        probs = self.forward_batch(patch[None])[0]
        self.clear_caches()
        return probs

    def predict_proba(self, x, batch_size=EVAL_BATCH) -> np.ndarray:
        x = self._check_input(x)
        if x.ndim == 3:
            x = x[None]
        out = np.empty((x.shape[0], NUM_CLASSES), dtype=DTYPE)
        for start in range(0, x.shape[0], batch_size):
            out[start:start + batch_size] = self.forward_batch(x[start:start + batch_size])
        self.clear_caches()
        return out

    def predict(self, x, batch_size=EVAL_BATCH) -> np.ndarray:
        """Predicted class index (argmax, ties to 0) per sample."""
        return np.argmax(self.predict_proba(x, batch_size), axis=1)

    def backward(self, grad_logits) -> list[dict]:
        """Back-propagate a gradient w.r.t. the logistic pre-activation.

        Returns one gradient dict per layer (empty for parameter-free layers).
        """
        grad = grad_logits
        grads = [dict() for _ in self.layers]
        first_learnable = next(i for i, layer in enumerate(self.layers) if layer.params)
        # the fused loss gradient already accounts for the logistic layer
        self.layers[-1].clear_cache()
        for i in range(len(self.layers) - 2, first_learnable - 1, -1):
            grad, g = self.layers[i].backward(grad, need_input_grad=i > first_learnable)
            grads[i] = g
        self.clear_caches()
        return grads

    def loss_and_grads(self, x, targets):
        probs = self.forward_batch(x)
        loss, grad = cross_entropy_loss(probs, targets)
        return loss, probs, self.backward(grad)

    def clear_caches(self):
        for layer in self.layers:
            layer.clear_cache()


def build(config: NetworkConfig, rng: Rng, conv_method: str = "auto") -> Network:
    """Instantiate ``config`` with Glorot-uniform weights and zero biases.

    Layers draw from ``rng`` in order, so the same seed gives bit-identical
    parameters.
    """
    net = Network.from_config(config, conv_method)
    for layer in net.layers:
        if layer.params:
            layer.init(rng)
    log.debug("built %s network with %d parameters", config.preset, net.parameter_count)
    return net


def one_hot_targets(labels) -> np.ndarray:
    """Dataset labels (1 = event present) to one-hot targets where class 0 = event."""
    labels = np.asarray(labels)
    targets = np.zeros((labels.shape[0], NUM_CLASSES), dtype=DTYPE)
    targets[np.arange(labels.shape[0]), np.where(labels == 1, 0, 1)] = 1.0
    return targets


def label_to_class(labels) -> np.ndarray:
    return np.where(np.asarray(labels) == 1, 0, 1)


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class SgdParams:
    learning_rate: float = 10 ** -2.5
    weight_decay: float = 1e-4
    momentum: float = 0.495
    batch_size: int = 136
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ValidationError(f"learning_rate must be a finite value >= 0, got {self.learning_rate}")
        if not self.weight_decay >= 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    val_loss: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    steps: int = 0

    CSV_FIELDS = ("epoch", "train_loss", "train_acc", "val_acc")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_FIELDS)
        for r in self.records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.val_acc)])
        return buf.getvalue()

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


def _arrays(dataset, config: NetworkConfig, what: str):
    patches = as_tensor(dataset.patches)
    if patches.shape[0] == 0:
        raise ValidationError(f"{what} dataset is empty")
    if patches.shape[1:] != config.input_dims:
        raise ValidationError(
            f"{what} dataset dims {patches.shape[1:]} do not match network input dims {config.input_dims}")
    return patches, np.asarray(dataset.labels)


def sgd_step(net: Network, grads, velocity, params: SgdParams, lr=None):
    """Momentum update ``v <- mu v - lr (g + wd w)``, ``w <- w + v``; biases are not decayed."""
    lr = params.learning_rate if lr is None else lr
    for i, layer in enumerate(net.layers):
        for name, w in layer.params.items():
            g = grads[i][name]
            if name == "weight" and params.weight_decay:
                g = g + params.weight_decay * w
            v = velocity[i][name]
            v *= params.momentum
            v -= lr * g
            w += v


def train(net: Network, train_set, val_set, params: SgdParams, callback=None) -> TrainingLog:
    """Minibatch SGD with momentum and L2 weight decay.

    Each epoch reshuffles the training set from ``params.seed``; the final
    partial minibatch is kept. The epoch's train loss and accuracy are running
    averages over the minibatches as they were seen (before each update);
    validation metrics are computed after the epoch.
    """
    x, labels = _arrays(train_set, net.config, "training")
    vx, vlabels = _arrays(val_set, net.config, "validation")
    targets = one_hot_targets(labels)
    classes = label_to_class(labels)
    rng = Rng(params.seed)
    velocity = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]
    history = TrainingLog()
    n = x.shape[0]
    for epoch in range(1, params.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, params.batch_size):
            idx = order[start:start + params.batch_size]
            loss, probs, grads = net.loss_and_grads(x[idx], targets[idx])
            loss_sum += loss * idx.size
            correct += int(np.sum(np.argmax(probs, axis=1) == classes[idx]))
            if params.learning_rate:
                sgd_step(net, grads, velocity, params)
            history.steps += 1
        val = evaluate_arrays(net, vx, vlabels)
        rec = EpochRecord(epoch, loss_sum / n, correct / n, val.accuracy, val.loss)
        history.records.append(rec)
        log.info("epoch %d: train_loss=%.4f train_acc=%.4f val_acc=%.4f", epoch, rec.train_loss,
                 rec.train_acc, rec.val_acc)
        if callback is not None:
            callback(rec)
    return history


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    """Accuracy and confusion matrix with rows = predicted class, columns = true label.

    Index 0 is the event class, index 1 its absence. ``confusion`` divides
    each column of ``counts`` by its total (a column with no samples stays 0).
    """

    accuracy: float
    confusion: np.ndarray
    counts: np.ndarray
    loss: float = float("nan")

    @classmethod
    def from_counts(cls, counts, loss=float("nan")) -> "EvalReport":
        counts = np.asarray(counts, dtype=np.int64)
        total = counts.sum()
        if total == 0:
            raise ValidationError("cannot build a report from zero samples")
        col = counts.sum(axis=0)
        confusion = np.divide(counts, col[None, :], out=np.zeros((2, 2)), where=col[None, :] > 0)
        return cls(float(np.trace(counts) / total), confusion, counts, loss)

    def format_table(self, event_name: str = "Event", digits: int = 3) -> str:
        """Render in the row = predicted, column = label layout."""
        pos, neg = event_name, f"Non_{event_name}"
        head = ["", f"Label {pos}", f"Label {neg}"]
        rows = [[f"Predict {pos}"] + [f"{v:.{digits}f}" for v in self.confusion[0]],
                [f"Predict {neg}"] + [f"{v:.{digits}f}" for v in self.confusion[1]]]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(3)]
        lines = [" | ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in [head] + rows]
        lines.insert(1, "-+-".join("-" * wd for wd in widths))
        return "\n".join(lines)


def evaluate_arrays(net: Network, x, labels) -> EvalReport:
    probs = net.predict_proba(x)
    pred = np.argmax(probs, axis=1)
    true = label_to_class(labels)
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (pred, true), 1)
    loss, _ = cross_entropy_loss(probs, one_hot_targets(labels))
    return EvalReport.from_counts(counts, loss)


def evaluate(net: Network, data) -> EvalReport:
    x, labels = _arrays(data, net.config, "evaluation")
    return evaluate_arrays(net, x, labels)


# -- gradient check ------------------------------------------------------------

def _relative_error(a, f):
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def _tail_losses(net: Network, start: int, acts, target):
    """Per-sample loss after running ``acts`` through layers ``start..``."""
    out = acts
    for layer in net.layers[start:]:
        out = layer.forward(out)
    net.clear_caches()
    return cross_entropy_per_sample(out, np.broadcast_to(target, out.shape))


def _numeric_direct(net, i, name, layer_input, target, eps):
    """Central differences, one parameter at a time, re-running layers ``i..``."""
    w = net.layers[i].params[name]
    flat = w.reshape(-1)
    num = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        lp = _tail_losses(net, i, layer_input[None], target)[0]
        flat[k] = orig - eps
        lm = _tail_losses(net, i, layer_input[None], target)[0]
        flat[k] = orig
        num[k] = (lp - lm) / (2 * eps)
    return num


class _Baseline:
    """Activations and non-linearity patterns of one unperturbed forward pass."""

    def __init__(self, net: Network, patch):
        self.acts = [patch]
        self.patterns = {}
        for j, layer in enumerate(net.layers):
            out = layer.forward(self.acts[-1][None])[0]
            if isinstance(layer, ReLU):
                self.patterns[j] = self.acts[-1] > 0
            elif isinstance(layer, MaxPool2D):
                self.patterns[j] = layer._cache[1][0]
            self.acts.append(out)
        net.clear_caches()


def _dense_tail(net, start, batch, base: _Baseline, target, crossed):
    """Run ``batch`` (inputs of layer ``start``) to per-sample losses, flagging
    samples whose ReLU signs or pooling winners differ from the baseline."""
    out = batch
    for j in range(start, len(net.layers)):
        layer = net.layers[j]
        if isinstance(layer, ReLU):
            crossed |= np.any((out > 0) != base.patterns[j], axis=tuple(range(1, out.ndim)))
        out = layer.forward(out)
        if isinstance(layer, MaxPool2D):
            crossed |= np.any(layer._cache[1] != base.patterns[j], axis=(1, 2, 3))
    net.clear_caches()
    return cross_entropy_per_sample(out, np.broadcast_to(target, out.shape))


def _local_losses(net, i, unit, pert, base: _Baseline, target):
    """Losses when only ``unit`` (a conv channel or fc unit) of layer ``i``'s
    output is replaced by ``pert`` (one row per perturbation).

    ReLU and pooling act per channel, so the change stays confined to that
    slice until the next conv/fc layer, whose output is then the baseline
    plus the layer applied to the change (both are linear in their input).
    """
    crossed = np.zeros(pert.shape[0], dtype=bool)
    cur = pert
    j = i + 1
    layers = net.layers
    while not layers[j].params:
        layer = layers[j]
        if isinstance(layer, ReLU):
            crossed |= np.any((cur > 0) != base.patterns[j][unit], axis=tuple(range(1, cur.ndim)))
            cur = np.maximum(cur, 0.0)
        elif isinstance(layer, MaxPool2D):
            pool = MaxPool2D(layer.spec)
            cur = pool.forward(cur[:, None])[:, 0]
            crossed |= np.any(pool._cache[1][:, 0] != base.patterns[j][unit], axis=(1, 2))
        else:
            # perturbed layer feeds the output non-linearity directly
            z = np.repeat(base.acts[j][None], pert.shape[0], axis=0)
            z[:, unit] = cur
            return _dense_tail(net, j, z, base, target, crossed), crossed
        j += 1
    change = cur - base.acts[j][unit]
    layer = layers[j]
    w = layer.params["weight"]
    if isinstance(layer, Conv2D):
        z = base.acts[j + 1][None] + conv2d_valid(change[:, None], w[:, unit:unit + 1], None, layer.method)
    else:
        size = int(np.prod(base.acts[j].shape[1:])) if base.acts[j].ndim > 1 else 1
        block = slice(unit * size, (unit + 1) * size)
        z = base.acts[j + 1][None] + change.reshape(change.shape[0], -1) @ w[:, block].T
    return _dense_tail(net, j + 1, z, base, target, crossed), crossed


def _unit_deltas(layer, name, layer_input, unit, idx):
    """Per-unit-step change of output slice ``unit`` for parameters ``idx``."""
    if name == "bias":
        return np.ones((len(idx),) + (layer.output_shape(layer_input.shape)[1:]
                                      if isinstance(layer, Conv2D) else ()))
    if isinstance(layer, Conv2D):
        _, ho, wo = layer.output_shape(layer_input.shape)
        _, cc, aa, bb = np.unravel_index(idx, layer.params["weight"].shape)
        return np.stack([layer_input[c, a:a + ho, b:b + wo] for c, a, b in zip(cc, aa, bb)])
    _, vv = np.unravel_index(idx, layer.params["weight"].shape)
    return layer_input.reshape(-1)[vv]


def _numeric_batched(net, i, name, base: _Baseline, target, eps, idx=None, chunk_bytes=32 * 2**20):
    """Central differences for parameters ``idx`` of one array, many at a time.

    Returns the estimates and a flag per parameter telling whether either
    evaluation crossed a ReLU or max-pool switching point.
    """
    layer = net.layers[i]
    w = layer.params[name]
    if idx is None:
        idx = np.arange(w.size)
    # output slice each parameter touches: leading weight axis, or the bias index
    units = idx if name == "bias" else np.unravel_index(idx, w.shape)[0]
    out_slice_size = int(np.prod(base.acts[i + 1].shape[1:])) if base.acts[i + 1].ndim > 1 else 1
    chunk = max(1, chunk_bytes // (8 * out_slice_size * 4))
    num = np.empty(idx.size)
    crossed = np.zeros(idx.size, dtype=bool)
    for unit in np.unique(units):
        pos = np.flatnonzero(units == unit)
        for start in range(0, pos.size, chunk):
            sel = pos[start:start + chunk]
            delta = eps * _unit_deltas(layer, name, base.acts[i], unit, idx[sel])
            centre = base.acts[i + 1][unit]
            lp, cp = _local_losses(net, i, unit, centre + delta, base, target)
            lm, cm = _local_losses(net, i, unit, centre - delta, base, target)
            num[sel] = (lp - lm) / (2 * eps)
            crossed[sel] = cp | cm
    return num, crossed


# Step sizes tried, relative to eps, when a difference straddles a kink.
_KINK_STEPS = (1e-2, 1e-4)
# Step sizes tried when float64 rounding swamps a tiny difference (capped at 1e-3).
_PRECISION_STEPS = (10.0, 100.0)
_ROUNDING = 2.0 ** -53


@dataclass
class GradCheckEntry:
    layer: int
    name: str
    size: int
    max_error: float
    kink_retries: int = 0
    precision_retries: int = 0
    unresolved: int = 0


def gradient_check(net: Network, patch, label, eps: float = 1e-5, method: str = "auto",
                   details: bool = False):
    """Largest relative error between back-propagated and central-difference gradients.

    Relative error is ``|a - f| / max(|a|, |f|, 1e-8)`` over every parameter.

    ``method="direct"`` perturbs each parameter in place and re-runs the
    network from the owning layer, nothing more.

    ``method="batched"`` (the default under ``"auto"``) evaluates many
    perturbations at once and guards the two ways a step-``eps`` difference
    stops measuring the derivative:

    * a parameter whose +-eps evaluations change a ReLU sign or a max-pool
      winner straddles a kink; it is re-differenced with ``eps * 1e-2`` and
      ``eps * 1e-4``, and if it still switches it is reported as unresolved
      and left out of the maximum;
    * a parameter whose loss change is so small that float64 rounding of the
      loss (about ``2**-53 * loss / eps``) dominates, and whose estimate is
      not already exact (dead units give 0 on both sides), is re-differenced with
      ``10 * eps`` and ``100 * eps`` (never above 1e-3), keeping the first
      step that does not switch.

    With ``details=True`` also returns a list of :class:`GradCheckEntry`.
    """
    if not 0 < eps <= 1e-3:
        raise ValidationError(f"eps must lie in (0, 1e-3], got {eps}")
    if method not in ("auto", "direct", "batched"):
        raise ValueError(f"unknown gradient-check method {method!r}")
    patch = net._check_input(patch)
    if patch.ndim != 3:
        raise ShapeError("gradient_check expects a single patch")
    target = one_hot_targets(np.array([label]))[0]
    loss, _, grads = net.loss_and_grads(patch[None], target[None])
    base = _Baseline(net, patch)

    worst = 0.0
    entries = []
    for i, name, w in list(net.named_parameters()):
        analytic = grads[i][name].reshape(-1)
        entry = GradCheckEntry(i, name, w.size, 0.0)
        if method == "direct":
            num = _numeric_direct(net, i, name, base.acts[i], target, eps)
            err = _relative_error(analytic, num)
        else:
            num, crossed = _numeric_batched(net, i, name, base, target, eps)
            entry.kink_retries = int(crossed.sum())
            for factor in _KINK_STEPS:
                if not crossed.any():
                    break
                retry = np.flatnonzero(crossed)
                num[retry], again = _numeric_batched(net, i, name, base, target, eps * factor, idx=retry)
                crossed[retry] = again
            noise = 4 * _ROUNDING * max(abs(loss), 1.0) / eps
            scale = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-8)
            noisy = ~crossed & (noise / scale > 1e-5) & (analytic != num)
            entry.precision_retries = int(noisy.sum())
            for factor in _PRECISION_STEPS:
                step = min(eps * factor, 1e-3)
                if not noisy.any() or step <= eps:
                    break
                retry = np.flatnonzero(noisy)
                est, switched = _numeric_batched(net, i, name, base, target, step, idx=retry)
                ok = ~switched
                num[retry[ok]] = est[ok]
                scale = np.maximum(np.maximum(np.abs(analytic[retry]), np.abs(num[retry])), 1e-8)
                noisy[retry[ok]] = 4 * _ROUNDING * max(abs(loss), 1.0) / step / scale[ok] > 1e-5
            entry.unresolved = int(crossed.sum())
            err = _relative_error(analytic, num)[~crossed]
        entry.max_error = float(err.max()) if err.size else 0.0
        worst = max(worst, entry.max_error)
        entries.append(entry)
    return (worst, entries) if details else worst


# -- model files ---------------------------------------------------------------

def save_model(net: Network) -> bytes:
    """Serialise to the CNNM container.

    Layout (little-endian): magic ``CNNM``, u32 version, length-prefixed UTF-8
    JSON config block (network config plus optional ``metadata``), u32
    parameter-array count, then per array in layer
    order: u32 ndim, ndim x u32 extents, float64 values.
    """
    out = Writer()
    out.raw(MODEL_MAGIC)
    out.u32(MODEL_VERSION)
    block = net.config.to_dict()
    if net.metadata:
        block["metadata"] = net.metadata
    out.text(json.dumps(block, sort_keys=True))
    arrays = [w for _, _, w in net.named_parameters()]
    out.u32(len(arrays))
    for w in arrays:
        out.u32(w.ndim)
        for d in w.shape:
            out.u32(d)
        out.f64_array(w)
    return out.getvalue()


def load_model(data: bytes, conv_method: str = "auto") -> Network:
    r = Reader(data)
    magic = r.raw(4, "magic")
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", 0)
    version = r.u32("version")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", 4)
    at = r.pos
    try:
        block = json.loads(r.text("config block"))
        config = NetworkConfig.from_dict(block)
        net = Network.from_config(config, conv_method)
        net.metadata = dict(block.get("metadata", {}))
    except (json.JSONDecodeError, ConfigError, ShapeError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"invalid config block: {exc}", at) from None
    params = list(net.named_parameters())
    at = r.pos
    count = r.u32("parameter array count")
    if count != len(params):
        raise FormatError(f"model has {count} parameter arrays, config implies {len(params)}", at)
    for i, name, w in params:
        at = r.pos
        ndim = r.u32("ndim")
        shape = tuple(r.u32("extent") for _ in range(ndim)) if ndim <= 8 else None
        if shape != w.shape:
            raise FormatError(f"layer {i} {name}: stored shape {shape} != expected {w.shape}", at)
        w[...] = r.f64_array(w.size, f"layer {i} {name}").reshape(w.shape)
    r.expect_end()
    return net


def save_model_file(net: Network, path):
    with open(path, "wb") as fh:
        fh.write(save_model(net))


def load_model_file(path, conv_method: str = "auto") -> Network:
    with open(path, "rb") as fh:
        return load_model(fh.read(), conv_method)


def shape_chain(config: NetworkConfig) -> list:
    """Compact dims chain as printed in reports: image dims for conv/pool,
    ``flatten N`` before the first fc, unit counts for fc layers."""
    chain = []
    for step in infer_shapes(config):
        if step.kind in ("conv", "pool"):
            chain.append(step.out_dims)
        elif step.kind == "fc":
            if len(step.in_dims) == 3:
                chain.append(("flatten", int(np.prod(step.in_dims))))
            chain.append(step.out_dims[0])
    return chain


def describe(net: Network) -> str:
    lines = [f"{net.config.preset} network, input {'x'.join(map(str, net.config.input_dims))}"]
    for step in infer_shapes(net.config):
        lines.append(f"  {step.label:<14} -> {'x'.join(map(str, step.out_dims))}")
    lines.append(f"  parameters: {net.parameter_count}")
    return "\n".join(lines)


__all__: Sequence[str] = [
    "NetworkConfig", "Network", "SgdParams", "TrainingLog", "EpochRecord", "EvalReport",
    "ShapeStep", "preset_config", "table_config", "infer_shapes", "shape_chain", "build",
    "train", "evaluate", "gradient_check", "save_model", "load_model", "load_config",
    "parse_layer_spec", "one_hot_targets",
]
