"""Minimal convolutional networks with explicit forward and backward passes.

Everything runs in float64 so finite-difference oracles stay tight.  Layers
are freestanding objects with their own backward rules; a MicroNet is an
ordered stack ending in a sigmoid head, with per-layer trainability flags
realizing the freeze/fine-tune phases and per-parameter Adam state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import LabeledSample
from .errors import DataError, NumericError
from .weighting import mean_bce

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Conv2d:
    """Valid-padding, stride-1 convolution over (N, C, H, W) inputs."""

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, ksize: int, rng: np.random.Generator | None):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.trainable = True
        if rng is None:
            w = np.zeros((out_ch, in_ch, ksize, ksize))
        else:
            scale = np.sqrt(2.0 / (in_ch * ksize * ksize))
            w = rng.standard_normal((out_ch, in_ch, ksize, ksize)) * scale
        self.params = {"w": w, "b": np.zeros(out_ch)}

    def forward(self, x, training, rng):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DataError(f"conv2d expects (N,{self.in_ch},H,W), got {x.shape}")
        n, _, h, w = x.shape
        kh = self.ksize
        oh, ow = h - kh + 1, w - kh + 1
        if oh < 1 or ow < 1:
            raise DataError(f"conv2d kernel {kh} larger than input {h}x{w}")
        wt = self.params["w"]
        y = np.zeros((n, self.out_ch, oh, ow))
        for di in range(kh):
            for dj in range(kh):
                y += np.einsum(
                    "nchw,oc->nohw", x[:, :, di : di + oh, dj : dj + ow], wt[:, :, di, dj]
                )
        y += self.params["b"][None, :, None, None]
        return y, x

    def backward(self, ctx, dy, need_param_grads):
        x = ctx
        kh = self.ksize
        oh, ow = dy.shape[2], dy.shape[3]
        wt = self.params["w"]
        dx = np.zeros_like(x)
        grads = None
        if need_param_grads:
            dw = np.zeros_like(wt)
            for di in range(kh):
                for dj in range(kh):
                    dw[:, :, di, dj] = np.einsum(
                        "nohw,nchw->oc", dy, x[:, :, di : di + oh, dj : dj + ow]
                    )
            grads = {"w": dw, "b": dy.sum(axis=(0, 2, 3))}
        for di in range(kh):
            for dj in range(kh):
                dx[:, :, di : di + oh, dj : dj + ow] += np.einsum(
                    "nohw,oc->nchw", dy, wt[:, :, di, dj]
                )
        return dx, grads

    def spec(self):
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "ksize": self.ksize,
            "trainable": self.trainable,
        }


class Relu:
    kind = "relu"
    trainable = False
    params: dict = {}

    def forward(self, x, training, rng):
        return np.maximum(x, 0.0), x > 0

    def backward(self, ctx, dy, need_param_grads):
        return dy * ctx, None

    def spec(self):
        return {"kind": self.kind}


class MaxPool2:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2"
    trainable = False
    params: dict = {}

    def forward(self, x, training, rng):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        if oh < 1 or ow < 1:
            raise DataError(f"maxpool2 needs at least 2x2 input, got {h}x{w}")
        windows = (
            x[:, :, : 2 * oh, : 2 * ow]
            .reshape(n, c, oh, 2, ow, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, oh, ow, 4)
        )
        idx = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, ctx, dy, need_param_grads):
        (n, c, h, w), idx = ctx
        oh, ow = dy.shape[2], dy.shape[3]
        scatter = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(scatter, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dx[:, :, : 2 * oh, : 2 * ow] = (
            scatter.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
        )
        return dx, None

    def spec(self):
        return {"kind": self.kind}


class Dense:
    """Fully connected layer; flattens any input to (N, in_features)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None):
        self.in_features = in_features
        self.out_features = out_features
        self.trainable = True
        if rng is None:
            w = np.zeros((in_features, out_features))
        else:
            w = rng.standard_normal((in_features, out_features)) * np.sqrt(2.0 / in_features)
        self.params = {"w": w, "b": np.zeros(out_features)}

    def forward(self, x, training, rng):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise DataError(
                f"dense expects {self.in_features} features, got {flat.shape[1]} from {x.shape}"
            )
        return flat @ self.params["w"] + self.params["b"], (x.shape, flat)

    def backward(self, ctx, dy, need_param_grads):
        in_shape, flat = ctx
        grads = None
        if need_param_grads:
            grads = {"w": flat.T @ dy, "b": dy.sum(axis=0)}
        dx = (dy @ self.params["w"].T).reshape(in_shape)
        return dx, grads

    def spec(self):
        return {
            "kind": self.kind,
            "in_features": self.in_features,
            "out_features": self.out_features,
            "trainable": self.trainable,
        }


class Dropout:
    """Inverted dropout: surviving units are scaled by 1/(1-rate) at training time."""

    kind = "dropout"
    trainable = False
    params: dict = {}

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise DataError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training, rng):
        if not training or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("training-mode dropout needs a random generator")
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, ctx, dy, need_param_grads):
        if ctx is None:
            return dy, None
        return dy * ctx, None

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}


class SigmoidHead:
    """Squeezes (N, 1) logits to (N,) probabilities via a stable sigmoid."""

    kind = "sigmoid_head"
    trainable = False
    params: dict = {}

    def forward(self, x, training, rng):
        z = x.reshape(x.shape[0])
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        return p, (x.shape, p)

    def backward(self, ctx, dy, need_param_grads):
        in_shape, p = ctx
        return (dy * p * (1.0 - p)).reshape(in_shape), None

    def spec(self):
        return {"kind": self.kind}


@dataclass
class MicroNet:
    architecture_id: str
    layers: list
    head_start: int
    input_side: int
    version: int = 0
    adam: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        kinds = [layer.kind for layer in self.layers]
        if kinds.count("sigmoid_head") != 1 or kinds[-1] != "sigmoid_head":
            raise ValueError("a MicroNet needs exactly one sigmoid_head, at the end")
        if "conv2d" not in kinds:
            raise ValueError("a MicroNet needs at least one conv2d layer")

    @property
    def final_conv_index(self) -> int:
        return max(i for i, layer in enumerate(self.layers) if layer.kind == "conv2d")

    def parameterized(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.params]

    def trainable_params(self) -> list[tuple[int, str]]:
        out = []
        for i in self.parameterized():
            if self.layers[i].trainable:
                out.extend((i, name) for name in sorted(self.layers[i].params))
        return out


@dataclass
class ForwardCache:
    probs: np.ndarray
    ctxs: list
    conv_activation: np.ndarray
    net_version: int
    training: bool


@dataclass
class GradientSet:
    params: dict
    conv_activation_grad: np.ndarray


def forward(
    net: MicroNet,
    batch: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the stack; dropout fires only when training=True."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4:
        raise DataError(f"expected (N, C, H, W) batch, got shape {x.shape}")
    ctxs = []
    conv_activation = None
    conv_idx = net.final_conv_index
    for i, layer in enumerate(net.layers):
        x, ctx = layer.forward(x, training, rng)
        ctxs.append(ctx)
        if i == conv_idx:
            conv_activation = x
    return x, ForwardCache(
        probs=x,
        ctxs=ctxs,
        conv_activation=conv_activation,
        net_version=net.version,
        training=training,
    )


def _check_cache(net: MicroNet, cache: ForwardCache) -> None:
    if cache.net_version != net.version:
        raise ValueError(
            f"stale forward cache: built at version {cache.net_version}, net is at {net.version}"
        )


def backward(net: MicroNet, cache: ForwardCache, labels: np.ndarray) -> GradientSet:
    """Backprop mean BCE; parameter gradients only where trainable.

    Also exposes the loss gradient at the final conv activation stack, the
    quantity the class-activation machinery consumes.
    """
    _check_cache(net, cache)
    y = np.asarray(labels, dtype=np.float64)
    n = y.shape[0]
    if cache.probs.shape[0] != n:
        raise ValueError(f"cache holds {cache.probs.shape[0]} rows, labels {n}")
    # Fused sigmoid+BCE derivative at the logit, averaged over the batch.
    head_shape = cache.ctxs[-1][0]
    dy = ((cache.probs - y) / n).reshape(head_shape)
    param_grads = {}
    conv_idx = net.final_conv_index
    conv_grad = None
    for i in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[i]
        if i == conv_idx:
            conv_grad = dy
        need = bool(layer.params) and layer.trainable
        dy, grads = layer.backward(cache.ctxs[i], dy, need)
        if grads is not None:
            for name, g in grads.items():
                param_grads[(i, name)] = g
    return GradientSet(params=param_grads, conv_activation_grad=conv_grad)


def class_score_gradient(net: MicroNet, cache: ForwardCache, class_id: int) -> np.ndarray:
    """Gradient of the pre-sigmoid class score w.r.t. the final conv activations.

    The positive class scores the raw logit; the negative class its negation.
    """
    _check_cache(net, cache)
    if class_id not in (0, 1):
        raise ValueError(f"class_id must be 0 or 1, got {class_id}")
    head_shape = cache.ctxs[-1][0]
    seed = 1.0 if class_id == 1 else -1.0
    dy = np.full(head_shape, seed)
    conv_idx = net.final_conv_index
    for i in range(len(net.layers) - 2, conv_idx, -1):
        dy, _ = net.layers[i].backward(cache.ctxs[i], dy, False)
    return dy


def adam_step(net: MicroNet, grads: GradientSet, lr: float) -> MicroNet:
    """Standard Adam on every trainable parameter; frozen ones are untouched."""
    for key in net.trainable_params():
        i, name = key
        if key not in grads.params:
            raise ValueError(f"missing gradient for trainable parameter layer{i}.{name}")
        g = grads.params[key]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at layer{i}.{net.layers[i].kind}.{name}")
        slot = net.adam.setdefault(key, {"m": np.zeros_like(g), "v": np.zeros_like(g), "t": 0})
        slot["t"] += 1
        slot["m"] = ADAM_BETA1 * slot["m"] + (1 - ADAM_BETA1) * g
        slot["v"] = ADAM_BETA2 * slot["v"] + (1 - ADAM_BETA2) * g * g
        m_hat = slot["m"] / (1 - ADAM_BETA1 ** slot["t"])
        v_hat = slot["v"] / (1 - ADAM_BETA2 ** slot["t"])
        net.layers[i].params[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    net.version += 1
    return net


def batch_tensor(samples: list[LabeledSample]) -> np.ndarray:
    return np.stack([s.payload for s in samples])[:, None, :, :].astype(np.float64)


def predict_proba(net: MicroNet, samples: list[LabeledSample], batch_size: int = 64) -> np.ndarray:
    """Inference-mode probabilities, batched."""
    out = np.empty(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        p, _ = forward(net, batch_tensor(chunk), training=False)
        out[start : start + len(chunk)] = p
    return out


def _run_epochs(
    net: MicroNet,
    train: list[LabeledSample],
    val: list[LabeledSample],
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    phase: str,
    history: list[dict],
) -> None:
    labels = np.array([s.label for s in train], dtype=np.int64)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), batch_size):
            take = order[start : start + batch_size]
            batch = batch_tensor([train[i] for i in take])
            y = labels[take]
            probs, cache = forward(net, batch, training=True, rng=rng)
            losses.append(mean_bce(probs, y))
            grads = backward(net, cache, y)
            adam_step(net, grads, lr)
        record = {"phase": phase, "epoch": epoch, "train_loss": float(np.mean(losses))}
        if val:
            val_y = np.array([s.label for s in val], dtype=np.int64)
            record["val_loss"] = mean_bce(predict_proba(net, val, batch_size), val_y)
        history.append(record)


def set_phase1_trainability(net: MicroNet) -> None:
    """Freeze the backbone; train only the head."""
    for i in net.parameterized():
        net.layers[i].trainable = i >= net.head_start


def set_phase2_trainability(net: MicroNet, unfreeze_top: int) -> None:
    """Additionally unfreeze the last `unfreeze_top` parameterized backbone layers."""
    backbone = [i for i in net.parameterized() if i < net.head_start]
    to_unfreeze = set(backbone[len(backbone) - unfreeze_top :]) if unfreeze_top > 0 else set()
    for i in net.parameterized():
        net.layers[i].trainable = i >= net.head_start or i in to_unfreeze


def train_two_phase(
    net: MicroNet,
    train: list[LabeledSample],
    val: list[LabeledSample],
    config: RunConfig,
    rng: np.random.Generator,
) -> tuple[MicroNet, list[dict]]:
    """Head-only training at the head rate, then fine-tuning of the top of
    the backbone at the (small) main rate.

    Frozen backbone parameters are bit-identical across phase 1; phase 2
    touches only the configured unfrozen suffix plus the head.
    """
    if not train:
        raise DataError("training set is empty")
    history: list[dict] = []
    set_phase1_trainability(net)
    _run_epochs(
        net, train, val, config.freeze_epochs, config.head_learning_rate,
        config.batch_size, rng, "freeze", history,
    )
    set_phase2_trainability(net, config.unfreeze_top)
    _run_epochs(
        net, train, val, config.finetune_epochs, config.learning_rate,
        config.batch_size, rng, "finetune", history,
    )
    return net, history


# Base-learner layouts. Three small, deliberately different stacks: two
# depths of 3x3 blocks and one wider single 5x5 block.  Extra trailing
# pooling keeps the dense head nearly location-invariant, which is what
# lets these nets generalize across subjects at desk scale.
_LAYOUTS = {
    "convA": {"blocks": [(5, 3), (10, 3)], "extra_pools": 1, "hidden": 24},
    "convB": {"blocks": [(6, 3), (12, 3)], "extra_pools": 1, "hidden": 16},
    "convC": {"blocks": [(8, 5)], "extra_pools": 2, "hidden": 16},
}
BASE_ARCHITECTURES = tuple(_LAYOUTS)


def architecture_ids(k: int) -> list[str]:
    """K distinct architecture ids, cycling the base layouts with suffixes."""
    ids = []
    for i in range(k):
        base = BASE_ARCHITECTURES[i % len(BASE_ARCHITECTURES)]
        rep = i // len(BASE_ARCHITECTURES)
        ids.append(base if rep == 0 else f"{base}_r{rep}")
    return ids


def build_micronet(
    architecture_id: str,
    input_side: int,
    dropout_rate: float,
    rng: np.random.Generator,
) -> MicroNet:
    """Construct one of the registered layouts at the given input size."""
    base = architecture_id.split("_r")[0]
    if base not in _LAYOUTS:
        raise ValueError(f"unknown architecture {architecture_id!r} (bases: {BASE_ARCHITECTURES})")
    layout = _LAYOUTS[base]
    layers: list = []
    c, side = 1, input_side
    for out_ch, ksize in layout["blocks"]:
        layers.append(Conv2d(c, out_ch, ksize, rng))
        layers.append(Relu())
        layers.append(MaxPool2())
        c, side = out_ch, (side - ksize + 1) // 2
        if side < 1:
            raise ValueError(f"input side {input_side} too small for {architecture_id}")
    for _ in range(layout["extra_pools"]):
        if side >= 2:
            layers.append(MaxPool2())
            side //= 2
    head_start = len(layers)
    layers.append(Dense(c * side * side, layout["hidden"], rng))
    layers.append(Relu())
    layers.append(Dropout(dropout_rate))
    layers.append(Dense(layout["hidden"], 1, rng))
    layers.append(SigmoidHead())
    return MicroNet(
        architecture_id=architecture_id,
        layers=layers,
        head_start=head_start,
        input_side=input_side,
    )


def save_checkpoint(net: MicroNet, path: str | Path) -> None:
    """One-line JSON header plus a flat little-endian float64 parameter block."""
    header = {
        "architecture_id": net.architecture_id,
        "input_side": net.input_side,
        "head_start": net.head_start,
        "layers": [layer.spec() for layer in net.layers],
    }
    blocks = []
    for i in net.parameterized():
        for name in sorted(net.layers[i].params):
            blocks.append(net.layers[i].params[name].astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(b"".join(blocks))


def load_checkpoint(path: str | Path) -> MicroNet:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    layers: list = []
    for spec in header["layers"]:
        kind = spec["kind"]
        if kind == "conv2d":
            layer = Conv2d(spec["in_ch"], spec["out_ch"], spec["ksize"], None)
            layer.trainable = spec["trainable"]
        elif kind == "relu":
            layer = Relu()
        elif kind == "maxpool2":
            layer = MaxPool2()
        elif kind == "dense":
            layer = Dense(spec["in_features"], spec["out_features"], None)
            layer.trainable = spec["trainable"]
        elif kind == "dropout":
            layer = Dropout(spec["rate"])
        elif kind == "sigmoid_head":
            layer = SigmoidHead()
        else:
            raise DataError(f"unknown layer kind in checkpoint: {kind}")
        layers.append(layer)
    net = MicroNet(
        architecture_id=header["architecture_id"],
        layers=layers,
        head_start=header["head_start"],
        input_side=header["input_side"],
    )
    offset = nl + 1
    for i in net.parameterized():
        for name in sorted(net.layers[i].params):
            shape = net.layers[i].params[name].shape
            count = int(np.prod(shape))
            block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            net.layers[i].params[name] = block.reshape(shape).copy()
            offset += count * 8
    if offset != len(raw):
        raise DataError(f"checkpoint has {len(raw) - offset} trailing bytes: {path}")
    return net
