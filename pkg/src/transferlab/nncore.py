"""Dense tensor math for small convolutional classifiers.

Forward and backward passes are written against numpy only. Each op has a
vectorized fast path here and an independent loop-nest oracle in the test
suite; the two must agree elementwise to tight tolerances.

Shapes
------
Images travel as ``(channels, height, width)`` for a single example or
``(batch, channels, height, width)`` for a minibatch. Fully connected layers
see flattened vectors; the model inserts the reshape when a conv feature map
feeds a dense layer. Training runs in float32; gradient checking builds
float64 models so finite differences are trustworthy.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, NumericError, ShapeError
from . import rng as rngmod

DEFAULT_DTYPE = np.float32


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.out_channels < 1:
            raise InputError(f"conv needs at least one output channel, got {self.out_channels}")
        if self.kernel < 1:
            raise InputError(f"conv kernel must be >= 1, got {self.kernel}")
        if self.stride < 1:
            raise InputError(f"conv stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise InputError(f"conv pad must be >= 0, got {self.pad}")


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1:
            raise InputError(f"pool window must be >= 1, got {self.window}")
        if self.stride < 1:
            raise InputError(f"pool stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class Lrn:
    """Cross-channel local response normalization.

    out_c = x_c / (k + alpha * sum over the channel window of x^2) ** beta
    with the window centered on c and clipped at the channel edges.
    """
    window: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 1.0

    def __post_init__(self):
        if self.window < 1:
            raise InputError(f"lrn window must be >= 1, got {self.window}")
        if self.k <= 0:
            raise InputError(f"lrn k must be > 0, got {self.k}")
        if self.alpha < 0:
            raise InputError(f"lrn alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Dropout:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise InputError(f"dropout rate must satisfy 0 <= p < 1, got {self.p}")


@dataclass(frozen=True)
class FullyConnected:
    width: int

    def __post_init__(self):
        if self.width < 1:
            raise InputError(f"fc width must be >= 1, got {self.width}")


@dataclass(frozen=True)
class SoftmaxXent:
    pass


LayerSpec = Conv | MaxPool | Lrn | Relu | Dropout | FullyConnected | SoftmaxXent
WEIGHT_KINDS = (Conv, FullyConnected)


def conv_out_dim(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# model spec: an ordered stack with end-to-end shape inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3:
            raise ShapeError(f"input shape must be (channels, height, width), got {self.input_shape}")
        if any(d < 1 for d in self.input_shape):
            raise ShapeError(f"input shape has a zero or negative extent: {self.input_shape}")
        if not self.layers or not isinstance(self.layers[-1], SoftmaxXent):
            raise InputError("a model spec must end with a softmax cross-entropy layer")
        if any(isinstance(l, SoftmaxXent) for l in self.layers[:-1]):
            raise InputError("softmax cross-entropy may only appear as the final layer")
        if not isinstance(self.layers[-2], FullyConnected):
            raise InputError("the loss layer must be fed by a fully connected layer")
        self.shapes()  # raises ShapeError on any inconsistency

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape after every layer, checking each against its input."""
        out: list[tuple[int, ...]] = []
        shape: tuple[int, ...] = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i}: conv needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                oh = conv_out_dim(h, layer.kernel, layer.stride, layer.pad)
                ow = conv_out_dim(w, layer.kernel, layer.stride, layer.pad)
                if oh < 1 or ow < 1:
                    raise ShapeError(
                        f"layer {i}: conv kernel {layer.kernel} does not fit input {shape} "
                        f"with stride {layer.stride}, pad {layer.pad}")
                shape = (layer.out_channels, oh, ow)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i}: maxpool needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                if layer.window > h or layer.window > w:
                    raise ShapeError(
                        f"layer {i}: pool window {layer.window} exceeds input extent {shape}")
                shape = (c,
                         (h - layer.window) // layer.stride + 1,
                         (w - layer.window) // layer.stride + 1)
            elif isinstance(layer, Lrn):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i}: lrn needs a (C, H, W) input, got {shape}")
            elif isinstance(layer, (Relu, Dropout)):
                pass
            elif isinstance(layer, FullyConnected):
                shape = (layer.width,)
            elif isinstance(layer, SoftmaxXent):
                if len(shape) != 1:
                    raise ShapeError(f"layer {i}: loss layer needs a flat logit vector, got {shape}")
            else:  # pragma: no cover
                raise InputError(f"unknown layer spec {layer!r}")
            if any(d < 1 for d in shape):
                raise ShapeError(f"layer {i} produces a zero-extent shape {shape}")
            out.append(shape)
        return out

    def weight_layers(self) -> list[int]:
        """Indices into ``layers`` that carry weights, in order."""
        return [i for i, l in enumerate(self.layers) if isinstance(l, WEIGHT_KINDS)]

    @property
    def num_weight_layers(self) -> int:
        return len(self.weight_layers())

    @property
    def num_classes(self) -> int:
        return self.layers[-2].width

    def weight_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """(weights, bias) shapes for each weight layer, in stack order."""
        shapes = self.shapes()
        out = []
        for i in self.weight_layers():
            layer = self.layers[i]
            in_shape = self.input_shape if i == 0 else shapes[i - 1]
            if isinstance(layer, Conv):
                out.append(((layer.out_channels, in_shape[0], layer.kernel, layer.kernel),
                            (layer.out_channels,)))
            else:
                fan_in = int(np.prod(in_shape))
                out.append(((fan_in, layer.width), (layer.width,)))
        return out

    def describe(self) -> str:
        """Canonical one-layer-per-line text form; hashable and parseable."""
        lines = ["input " + "x".join(str(d) for d in self.input_shape)]
        for layer in self.layers:
            if isinstance(layer, Conv):
                lines.append(f"conv out={layer.out_channels} kernel={layer.kernel} "
                             f"stride={layer.stride} pad={layer.pad}")
            elif isinstance(layer, MaxPool):
                lines.append(f"maxpool window={layer.window} stride={layer.stride}")
            elif isinstance(layer, Lrn):
                lines.append(f"lrn window={layer.window} alpha={layer.alpha!r} "
                             f"beta={layer.beta!r} k={layer.k!r}")
            elif isinstance(layer, Relu):
                lines.append("relu")
            elif isinstance(layer, Dropout):
                lines.append(f"dropout p={layer.p!r}")
            elif isinstance(layer, FullyConnected):
                lines.append(f"fc width={layer.width}")
            else:
                lines.append("softmax_xent")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.describe().encode("utf-8")).hexdigest()


def parse_spec(text: str) -> ModelSpec:
    """Inverse of :meth:`ModelSpec.describe`."""
    input_shape = None
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        if kind == "input":
            input_shape = tuple(int(d) for d in parts[1].split("x"))
            continue
        kv = {}
        for tok in parts[1:]:
            if "=" not in tok:
                raise InputError(f"descriptor line {lineno}: bad token {tok!r}")
            key, val = tok.split("=", 1)
            kv[key] = val
        if kind == "conv":
            layers.append(Conv(int(kv["out"]), int(kv["kernel"]), int(kv["stride"]), int(kv["pad"])))
        elif kind == "maxpool":
            layers.append(MaxPool(int(kv["window"]), int(kv["stride"])))
        elif kind == "lrn":
            layers.append(Lrn(int(kv["window"]), float(kv["alpha"]), float(kv["beta"]), float(kv["k"])))
        elif kind == "relu":
            layers.append(Relu())
        elif kind == "dropout":
            layers.append(Dropout(float(kv["p"])))
        elif kind == "fc":
            layers.append(FullyConnected(int(kv["width"])))
        elif kind == "softmax_xent":
            layers.append(SoftmaxXent())
        else:
            raise InputError(f"descriptor line {lineno}: unknown layer kind {kind!r}")
    if input_shape is None:
        raise InputError("descriptor is missing its input line")
    return ModelSpec(input_shape, tuple(layers))


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------

@dataclass
class LayerState:
    """Weights for one weight layer plus bookkeeping the optimizer honors."""
    weights: np.ndarray
    bias: np.ndarray
    frozen: bool = False
    origin: str = "random"

    def copy(self) -> "LayerState":
        return LayerState(self.weights.copy(), self.bias.copy(), self.frozen, self.origin)


@dataclass
class Model:
    spec: ModelSpec
    states: list[Optional[LayerState]]  # aligned with spec.layers; None for weightless layers

    def __post_init__(self):
        if len(self.states) != len(self.spec.layers):
            raise ShapeError("model states must align one-to-one with spec layers")
        want = dict(zip(self.spec.weight_layers(), self.spec.weight_shapes()))
        for i, state in enumerate(self.states):
            if i in want:
                if state is None:
                    raise ShapeError(f"layer {i} needs weights but has none")
                ws, bs = want[i]
                if tuple(state.weights.shape) != ws or tuple(state.bias.shape) != bs:
                    raise ShapeError(
                        f"layer {i} weight shapes {state.weights.shape}/{state.bias.shape} "
                        f"do not match spec {ws}/{bs}")
            elif state is not None:
                raise ShapeError(f"layer {i} is weightless but carries state")

    def weight_states(self) -> list[LayerState]:
        """States of the weight layers in stack order (1-based positions elsewhere)."""
        return [self.states[i] for i in self.spec.weight_layers()]

    def copy(self) -> "Model":
        return Model(self.spec, [s.copy() if s is not None else None for s in self.states])

    @property
    def dtype(self):
        return self.weight_states()[0].weights.dtype


def weight_layer_name(spec: ModelSpec, position: int) -> str:
    """Human name for 1-based weight layer ``position``, e.g. conv2 or fc1."""
    idx = spec.weight_layers()[position - 1]
    kind = "conv" if isinstance(spec.layers[idx], Conv) else "fc"
    before = sum(1 for j in spec.weight_layers()[:position - 1]
                 if isinstance(spec.layers[j], type(spec.layers[idx])))
    return f"{kind}{before + 1}"


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def _lift(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}- or {ndim}-dimensional input, got shape {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, spec: Conv,
                 want_cache: bool = False):
    """Cross-correlate ``x`` with ``weights`` under zero padding.

    Output spatial extent follows floor((in + 2*pad - kernel) / stride) + 1.
    """
    x4, lifted = _lift(x, 4)
    n, c, h, w = x4.shape
    oc, wc, kh, kw = weights.shape
    if wc != c:
        raise ShapeError(f"conv input has {c} channels but filters expect {wc}")
    oh = conv_out_dim(h, spec.kernel, spec.stride, spec.pad)
    ow = conv_out_dim(w, spec.kernel, spec.stride, spec.pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv kernel {spec.kernel} does not fit input {x4.shape[1:]}")
    if spec.pad:
        xp = np.pad(x4, ((0, 0), (0, 0), (spec.pad, spec.pad), (spec.pad, spec.pad)))
    else:
        xp = x4
    cols = _im2col(xp, kh, kw, spec.stride, oh, ow)
    out = np.tensordot(cols, weights, axes=([1, 2, 3], [1, 2, 3]))  # (n, oh, ow, oc)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias[None, :, None, None]
    out = out if not lifted else out[0]
    if not want_cache:
        return out
    return out, (cols, xp.shape, weights, spec, lifted)


def conv_backward(dout: np.ndarray, cache):
    cols, xp_shape, weights, spec, lifted = cache
    d4 = dout[None] if lifted else dout
    db = d4.sum(axis=(0, 2, 3))
    dw = np.tensordot(d4, cols, axes=([0, 2, 3], [0, 4, 5]))
    dcols = np.tensordot(d4, weights, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    oh, ow = d4.shape[2], d4.shape[3]
    s = spec.stride
    for i in range(weights.shape[2]):
        for j in range(weights.shape[3]):
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if spec.pad:
        dx = dxp[:, :, spec.pad:-spec.pad, spec.pad:-spec.pad]
    else:
        dx = dxp
    return (dx[0] if lifted else dx), dw, db


def maxpool_forward(x: np.ndarray, spec: MaxPool, want_cache: bool = False):
    """Max over sliding windows; ties resolve to the first cell in row-major scan order."""
    x4, lifted = _lift(x, 4)
    n, c, h, w = x4.shape
    if spec.window > h or spec.window > w:
        raise ShapeError(f"pool window {spec.window} exceeds input extent {x4.shape[1:]}")
    oh = (h - spec.window) // spec.stride + 1
    ow = (w - spec.window) // spec.stride + 1
    s = spec.stride
    stack = np.empty((n, c, spec.window * spec.window, oh, ow), dtype=x4.dtype)
    pos = 0
    for i in range(spec.window):
        for j in range(spec.window):
            stack[:, :, pos] = x4[:, :, i:i + s * oh:s, j:j + s * ow:s]
            pos += 1
    arg = stack.argmax(axis=2)  # first occurrence wins, i.e. row-major order in the window
    out = np.take_along_axis(stack, arg[:, :, None], axis=2)[:, :, 0]
    out = out if not lifted else out[0]
    if not want_cache:
        return out
    return out, (arg, x4.shape, spec, lifted)


def maxpool_backward(dout: np.ndarray, cache):
    arg, x_shape, spec, lifted = cache
    d4 = dout[None] if lifted else dout
    dx = np.zeros(x_shape, dtype=dout.dtype)
    oh, ow = d4.shape[2], d4.shape[3]
    s = spec.stride
    pos = 0
    for i in range(spec.window):
        for j in range(spec.window):
            sel = (arg == pos)
            if sel.any():
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += d4 * sel
            pos += 1
    return dx[0] if lifted else dx


def _lrn_window_sum(t: np.ndarray, window: int) -> np.ndarray:
    """Sum of ``t`` over a centered, edge-clipped window along the channel axis."""
    half = window // 2
    acc = t.copy()
    for off in range(1, half + 1):
        acc[:, off:] += t[:, :-off]
        acc[:, :-off] += t[:, off:]
    return acc


def lrn_forward(x: np.ndarray, spec: Lrn, want_cache: bool = False):
    x4, lifted = _lift(x, 4)
    denom_base = spec.k + spec.alpha * _lrn_window_sum(x4 * x4, spec.window)
    scale = denom_base ** (-spec.beta)
    out = x4 * scale
    out = out if not lifted else out[0]
    if not want_cache:
        return out
    return out, (x4, denom_base, scale, spec, lifted)


def lrn_backward(dout: np.ndarray, cache):
    x4, denom_base, scale, spec, lifted = cache
    d4 = dout[None] if lifted else dout
    t = d4 * x4 * denom_base ** (-spec.beta - 1.0)
    dx = d4 * scale - (2.0 * spec.alpha * spec.beta) * x4 * _lrn_window_sum(t, spec.window)
    return dx[0] if lifted else dx


def relu_forward(x: np.ndarray, want_cache: bool = False):
    out = np.maximum(x, 0)
    if not want_cache:
        return out
    return out, (x > 0)


def relu_backward(dout: np.ndarray, cache):
    return dout * cache


def dropout_forward(x: np.ndarray, spec: Dropout, mode: str,
                    rng: Optional[np.random.Generator] = None,
                    mask: Optional[np.ndarray] = None, want_cache: bool = False):
    """Inverted dropout: training scales kept units by 1/(1-p); eval is the identity."""
    if mode == "eval":
        out, cache = x, None
    elif mode in ("train", "fixed"):
        if mask is None:
            if rng is None:
                raise InputError("dropout in train mode needs a generator")
            mask = rng.random(x.shape) >= spec.p
        keep = np.asarray(1.0 - spec.p, dtype=x.dtype)
        out = x * mask / keep
        cache = (mask, keep)
    else:
        raise InputError(f"unknown dropout mode {mode!r}")
    if not want_cache:
        return out
    return out, cache


def dropout_backward(dout: np.ndarray, cache):
    if cache is None:
        return dout
    mask, keep = cache
    return dout * mask / keep


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, want_cache: bool = False):
    x2, lifted = _lift(x, 2)
    if x2.shape[1] != weights.shape[0]:
        raise ShapeError(f"fc input width {x2.shape[1]} does not match weights {weights.shape}")
    out = x2 @ weights + bias
    out = out if not lifted else out[0]
    if not want_cache:
        return out
    return out, (x2, weights, lifted)


def fc_backward(dout: np.ndarray, cache):
    x2, weights, lifted = cache
    d2 = dout[None] if lifted else dout
    dw = x2.T @ d2
    db = d2.sum(axis=0)
    dx = d2 @ weights.T
    return (dx[0] if lifted else dx), dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    z2, lifted = _lift(logits, 2)
    shifted = z2 - z2.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if lifted else p


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss and its gradient with respect to the logits."""
    z2, lifted = _lift(logits, 2)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z2.shape[0]:
        raise ShapeError(f"{z2.shape[0]} logit rows but {y.shape[0]} labels")
    c = z2.shape[1]
    if y.min() < 0 or y.max() >= c:
        raise InputError(f"label out of range for {c} classes: {y.min()}..{y.max()}")
    p = softmax(z2)
    n = z2.shape[0]
    eps_free = p[np.arange(n), y]
    # log of a softmax entry is safe: the true-class probability is never 0
    # in exact arithmetic, and float underflow would make the loss inf, which
    # the caller treats as a numeric failure rather than silently clipping.
    with np.errstate(divide="ignore"):
        loss = float(-np.log(eps_free).mean())
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, (grad[0] if lifted else grad.astype(z2.dtype, copy=False))


# ---------------------------------------------------------------------------
# whole-model forward / backward
# ---------------------------------------------------------------------------

def forward_logits(model: Model, x: np.ndarray, mode: str = "eval",
                   rng: Optional[np.random.Generator] = None,
                   masks: Optional[dict] = None, want_caches: bool = False):
    """Run the stack up to (not including) the loss layer and return logits."""
    x4, lifted = _lift(np.asarray(x), 4)
    if x4.shape[1:] != model.spec.input_shape:
        raise ShapeError(f"input shape {x4.shape[1:]} does not match spec {model.spec.input_shape}")
    caches = []
    h = x4
    for i, layer in enumerate(model.spec.layers):
        state = model.states[i]
        if isinstance(layer, Conv):
            h, cache = conv_forward(h, state.weights, state.bias, layer, want_cache=True)
            caches.append(("conv", cache))
        elif isinstance(layer, MaxPool):
            h, cache = maxpool_forward(h, layer, want_cache=True)
            caches.append(("maxpool", cache))
        elif isinstance(layer, Lrn):
            h, cache = lrn_forward(h, layer, want_cache=True)
            caches.append(("lrn", cache))
        elif isinstance(layer, Relu):
            h, cache = relu_forward(h, want_cache=True)
            caches.append(("relu", cache))
        elif isinstance(layer, Dropout):
            mask = None if masks is None else masks.get(i)
            h, cache = dropout_forward(h, layer, mode if mask is None else "fixed",
                                       rng=rng, mask=mask, want_cache=True)
            caches.append(("dropout", cache))
        elif isinstance(layer, FullyConnected):
            pre_shape = h.shape
            if h.ndim > 2:
                h = h.reshape(h.shape[0], -1)
            h, cache = fc_forward(h, state.weights, state.bias, want_cache=True)
            caches.append(("fc", (cache, pre_shape)))
        else:  # SoftmaxXent: logits stop here
            caches.append(("softmax_xent", None))
    logits = h[0] if lifted else h
    if want_caches:
        return logits, caches, lifted
    return logits


def loss_and_grads(model: Model, x: np.ndarray, labels, mode: str = "train",
                   rng: Optional[np.random.Generator] = None,
                   masks: Optional[dict] = None, lowest_needed: int = 0):
    """Forward plus backward pass.

    Returns ``(loss, grads, logits)`` where ``grads`` aligns with
    ``spec.layers`` and holds ``(dW, db)`` for weight layers, ``None``
    elsewhere. Backpropagation stops above ``lowest_needed``: layers with a
    smaller index get no gradient, which saves work when everything below
    that point is frozen.
    """
    logits, caches, lifted = forward_logits(model, x, mode=mode, rng=rng,
                                            masks=masks, want_caches=True)
    z = logits[None] if lifted else logits
    y = np.atleast_1d(np.asarray(labels))
    loss, dz = softmax_xent(z, y)
    grads: list = [None] * len(model.spec.layers)
    d = dz
    for i in range(len(model.spec.layers) - 1, -1, -1):
        if i < lowest_needed:
            break
        kind, cache = caches[i]
        if kind == "softmax_xent":
            continue
        if kind == "conv":
            d, dw, db = conv_backward(d, cache)
            grads[i] = (dw, db)
        elif kind == "maxpool":
            d = maxpool_backward(d, cache)
        elif kind == "lrn":
            d = lrn_backward(d, cache)
        elif kind == "relu":
            d = relu_backward(d, cache)
        elif kind == "dropout":
            d = dropout_backward(d, cache)
        elif kind == "fc":
            fc_cache, pre_shape = cache
            d, dw, db = fc_backward(d, fc_cache)
            grads[i] = (dw, db)
            if len(pre_shape) > 2:
                d = d.reshape(pre_shape)
    return loss, grads, logits


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _check_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """Small float64 model with well-scaled weights for finite differencing."""
    states: list[Optional[LayerState]] = [None] * len(spec.layers)
    for idx, (ws, bs) in zip(spec.weight_layers(), spec.weight_shapes()):
        fan_in = int(np.prod(ws[1:])) if len(ws) == 4 else ws[0]
        std = 1.0 / np.sqrt(fan_in)
        states[idx] = LayerState(rng.normal(0.0, std, ws), rng.normal(0.0, 0.1, bs))
    return Model(spec, states)


def grad_check(spec: ModelSpec, seed: int, epsilon: float = 1e-5,
               frozen: Sequence[int] = ()) -> float:
    """Max relative error between analytic and central-difference gradients.

    Builds a float64 model and batch from ``seed``, derandomizes dropout with
    fixed masks, and sweeps every parameter scalar of every weight layer not
    listed in ``frozen`` (1-based positions).
    """
    detail = grad_check_layers(spec, seed, epsilon, frozen)
    return max(detail.values())


def grad_check_layers(spec: ModelSpec, seed: int, epsilon: float = 1e-5,
                      frozen: Sequence[int] = (), model: Optional[Model] = None
                      ) -> dict[str, float]:
    """Per-weight-layer max relative errors; see :func:`grad_check`.

    ``model`` overrides the internally drawn weights; tests use it to inject
    faults. The diagnostic for a non-finite gradient names the first weight
    layer (in stack order) whose gradient went bad.
    """
    n_params = sum(int(np.prod(w)) + int(np.prod(b)) for w, b in spec.weight_shapes())
    if n_params >= 10_000:
        raise InputError(f"gradient check is for small models; this spec has {n_params} parameters")
    rng = rngmod.stream(rngmod.CHECK, seed)
    if model is None:
        model = _check_model(spec, rng)
    batch = 2
    x = rng.normal(0.0, 1.0, (batch,) + spec.input_shape)
    y = rng.integers(0, spec.num_classes, batch)

    masks = {}
    shapes = spec.shapes()
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dropout):
            in_shape = spec.input_shape if i == 0 else shapes[i - 1]
            masks[i] = rng.random((batch,) + in_shape) >= layer.p

    loss0, grads, _ = loss_and_grads(model, x, y, mode="fixed", masks=masks)
    frozen = set(frozen)
    errors: dict[str, float] = {}
    weight_idx = spec.weight_layers()
    for pos, idx in enumerate(weight_idx, start=1):
        if pos in frozen:
            continue
        name = weight_layer_name(spec, pos)
        dw, db = grads[idx]
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericError(f"non-finite analytic gradient in layer {name}", layer=name)
        worst = 0.0
        state = model.states[idx]
        for arr, darr in ((state.weights, dw), (state.bias, db)):
            flat = arr.ravel()
            dflat = darr.ravel()
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                up, _, _ = loss_and_grads(model, x, y, mode="fixed", masks=masks)
                flat[j] = orig - epsilon
                down, _, _ = loss_and_grads(model, x, y, mode="fixed", masks=masks)
                flat[j] = orig
                numeric = (up - down) / (2.0 * epsilon)
                if not np.isfinite(numeric):
                    raise NumericError(f"non-finite numeric gradient in layer {name}", layer=name)
                worst = max(worst, rel_error(float(dflat[j]), numeric))
        errors[name] = worst
    return errors
