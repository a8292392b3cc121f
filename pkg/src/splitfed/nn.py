"""Dense-tensor layers with exact analytic backward passes.

Tensors are C-contiguous float64 numpy arrays with a leading batch
dimension. Every operation here is a pure function of its inputs, so
values can be shared read-only across threads. Forward passes cache
nothing; backward passes take the original layer input and recompute
whatever they need, which keeps the client/server halves of a split
network bit-for-bit equal to the unsplit network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch, UnknownLayerKind

LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "avgpool2d", "relu", "tanh", "flatten")


def as_tensor(values) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(values, dtype=np.float64)


@dataclass
class ParameterSet:
    """Ordered, named parameter tensors plus a round counter.

    Order is stable across rounds: aggregation and SGD align entries by
    position and verify names/shapes pairwise.
    """

    entries: list[tuple[str, np.ndarray]] = field(default_factory=list)
    version: int = 0

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def get(self, name: str) -> np.ndarray:
        for entry_name, value in self.entries:
            if entry_name == name:
                return value
        raise KeyError(name)

    def element_count(self) -> int:
        return sum(value.size for _, value in self.entries)

    def clone(self) -> "ParameterSet":
        return ParameterSet([(n, v.copy()) for n, v in self.entries], self.version)

    def subset(self, prefixes: tuple[str, ...]) -> "ParameterSet":
        keep = [(n, v) for n, v in self.entries if n.split(".")[0] in prefixes]
        return ParameterSet(keep, self.version)


@dataclass
class GradientSet:
    """Loss gradients, shape-congruent entry by entry to a ParameterSet."""

    entries: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def element_count(self) -> int:
        return sum(value.size for _, value in self.entries)

    def l2_norm(self) -> float:
        total = 0.0
        for _, value in self.entries:
            total += float(np.sum(value * value))
        return float(np.sqrt(total))


def check_congruent(params: ParameterSet, grads: GradientSet) -> None:
    if len(params.entries) != len(grads.entries):
        raise ShapeMismatch(
            f"{len(params.entries)} parameter entries vs {len(grads.entries)} gradient entries"
        )
    for (pname, pval), (gname, gval) in zip(params.entries, grads.entries):
        if pname != gname or pval.shape != gval.shape:
            raise ShapeMismatch(f"entry {pname}{pval.shape} vs {gname}{gval.shape}")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward stack.

    kind-specific fields: dense uses in_features/out_features; conv2d uses
    in_channels/out_channels/kernel/stride/pad; pooling layers use pool
    (window == stride, non-overlapping). Activation and flatten layers
    carry no extra fields and own no parameters.
    """

    kind: str
    name: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    pool: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise UnknownLayerKind(self.kind)

    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.kind == "dense":
            return [
                (f"{self.name}.weight", (self.in_features, self.out_features)),
                (f"{self.name}.bias", (self.out_features,)),
            ]
        if self.kind == "conv2d":
            return [
                (
                    f"{self.name}.weight",
                    (self.kernel, self.kernel, self.in_channels, self.out_channels),
                ),
                (f"{self.name}.bias", (self.out_channels,)),
            ]
        return []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape."""
        if self.kind == "dense":
            if in_shape != (self.in_features,):
                raise ShapeMismatch(f"{self.name}: expected ({self.in_features},), got {in_shape}")
            return (self.out_features,)
        if self.kind == "conv2d":
            if len(in_shape) != 3 or in_shape[2] != self.in_channels:
                raise ShapeMismatch(f"{self.name}: expected (H, W, {self.in_channels}), got {in_shape}")
            h, w, _ = in_shape
            oh = (h + 2 * self.pad - self.kernel) // self.stride + 1
            ow = (w + 2 * self.pad - self.kernel) // self.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeMismatch(f"{self.name}: kernel {self.kernel} too large for input {in_shape}")
            return (oh, ow, self.out_channels)
        if self.kind in ("maxpool2d", "avgpool2d"):
            if len(in_shape) != 3:
                raise ShapeMismatch(f"{self.name}: expected (H, W, C), got {in_shape}")
            h, w, c = in_shape
            if h % self.pool or w % self.pool:
                raise ShapeMismatch(
                    f"{self.name}: input {h}x{w} not divisible by window {self.pool}"
                )
            return (h // self.pool, w // self.pool, c)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return in_shape  # relu, tanh


def _layer_params(layer: LayerSpec, params: ParameterSet) -> tuple[np.ndarray, np.ndarray]:
    try:
        weight = params.get(f"{layer.name}.weight")
        bias = params.get(f"{layer.name}.bias")
    except KeyError as exc:
        raise ShapeMismatch(f"missing parameter {exc.args[0]}") from exc
    return weight, bias


def _check_batch_input(layer: LayerSpec, x: np.ndarray) -> None:
    if x.ndim < 2:
        raise ShapeMismatch(f"{layer.name}: input must have a batch dimension, got shape {x.shape}")
    layer.output_shape(tuple(x.shape[1:]))  # validates


def layer_forward(layer: LayerSpec, x: np.ndarray, params: ParameterSet) -> np.ndarray:
    """Forward one layer over a batch; pure, caches nothing."""
    _check_batch_input(layer, x)
    if layer.kind == "dense":
        weight, bias = _layer_params(layer, params)
        return x @ weight + bias
    if layer.kind == "conv2d":
        weight, bias = _layer_params(layer, params)
        return _conv2d_forward(layer, x, weight, bias)
    if layer.kind == "maxpool2d":
        return _pool_windows(layer, x).max(axis=-1)
    if layer.kind == "avgpool2d":
        return _pool_windows(layer, x).mean(axis=-1)
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    if layer.kind == "tanh":
        return np.tanh(x)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    raise UnknownLayerKind(layer.kind)


def layer_backward(
    layer: LayerSpec, x: np.ndarray, upstream: np.ndarray, params: ParameterSet,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, GradientSet]:
    """Analytic input and parameter gradients for one layer.

    `x` is the same input that was fed forward; `upstream` has the shape of
    the layer's output. ReLU's subgradient at exactly 0 is fixed to 0.
    `need_input_grad=False` skips the input gradient (returned as None)
    for the layer sitting at the raw-data boundary.
    """
    _check_batch_input(layer, x)
    out_shape = (x.shape[0],) + layer.output_shape(tuple(x.shape[1:]))
    if upstream.shape != out_shape:
        raise ShapeMismatch(f"{layer.name}: upstream {upstream.shape} vs output {out_shape}")
    if layer.kind == "dense":
        weight, _ = _layer_params(layer, params)
        dx = upstream @ weight.T if need_input_grad else None
        dw = x.T @ upstream
        db = upstream.sum(axis=0)
        grads = GradientSet([(f"{layer.name}.weight", dw), (f"{layer.name}.bias", db)])
        return dx, grads
    if layer.kind == "conv2d":
        weight, _ = _layer_params(layer, params)
        return _conv2d_backward(layer, x, upstream, weight, need_input_grad)
    if layer.kind == "maxpool2d":
        windows = _pool_windows(layer, x)
        best = windows.argmax(axis=-1)
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, best[..., None], upstream[..., None], axis=-1)
        return _unpool_windows(layer, dwin, x.shape), GradientSet()
    if layer.kind == "avgpool2d":
        q2 = layer.pool * layer.pool
        dwin = np.repeat((upstream / q2)[..., None], q2, axis=-1)
        return _unpool_windows(layer, dwin, x.shape), GradientSet()
    if layer.kind == "relu":
        return upstream * (x > 0.0), GradientSet()
    if layer.kind == "tanh":
        y = np.tanh(x)
        return upstream * (1.0 - y * y), GradientSet()
    if layer.kind == "flatten":
        return upstream.reshape(x.shape), GradientSet()
    raise UnknownLayerKind(layer.kind)


def _gather_windows(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    # (N, Hp, Wp, C) -> (N*oh*ow, k*k*C), window-major (i, j, c)
    n, _, _, c = xp.shape
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    view = view[:, ::s, ::s]  # exactly oh x ow window origins
    cols = view.transpose(0, 1, 2, 4, 5, 3)  # (N, oh, ow, k, k, C)
    return np.ascontiguousarray(cols).reshape(n * oh * ow, k * k * c)


def _conv2d_forward(
    layer: LayerSpec, x: np.ndarray, weight: np.ndarray, bias: np.ndarray
) -> np.ndarray:
    n = x.shape[0]
    oh, ow, cout = layer.output_shape(tuple(x.shape[1:]))
    xp = _pad_nhwc(x, layer.pad)
    s, k = layer.stride, layer.kernel
    cols = _gather_windows(xp, k, s, oh, ow)
    out = cols @ weight.reshape(-1, cout) + bias
    return out.reshape(n, oh, ow, cout)


def _conv2d_backward(
    layer: LayerSpec, x: np.ndarray, upstream: np.ndarray, weight: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, GradientSet]:
    n, oh, ow = upstream.shape[0], upstream.shape[1], upstream.shape[2]
    s, k = layer.stride, layer.kernel
    cin, cout = layer.in_channels, layer.out_channels
    xp = _pad_nhwc(x, layer.pad)
    cols = _gather_windows(xp, k, s, oh, ow)
    ug = upstream.reshape(-1, cout)
    db = upstream.sum(axis=(0, 1, 2))
    dw = (cols.T @ ug).reshape(k, k, cin, cout)
    grads = GradientSet([(f"{layer.name}.weight", dw), (f"{layer.name}.bias", db)])
    if not need_input_grad:
        return None, grads
    dcols = (ug @ weight.reshape(-1, cout).T).reshape(n, oh, ow, k, k, cin)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * oh : s, j : j + s * ow : s, :] += dcols[:, :, :, i, j, :]
    p = layer.pad
    dx = dxp if p == 0 else dxp[:, p : p + x.shape[1], p : p + x.shape[2], :]
    return np.ascontiguousarray(dx), grads


def _pad_nhwc(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _pool_windows(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    # (N, H, W, C) -> (N, OH, OW, C, pool*pool), non-overlapping windows
    n, h, w, c = x.shape
    q = layer.pool
    oh, ow = h // q, w // q
    xr = x.reshape(n, oh, q, ow, q, c).transpose(0, 1, 3, 5, 2, 4)
    return xr.reshape(n, oh, ow, c, q * q)


def _unpool_windows(layer: LayerSpec, dwin: np.ndarray, x_shape: tuple) -> np.ndarray:
    n, h, w, c = x_shape
    q = layer.pool
    oh, ow = h // q, w // q
    dx = dwin.reshape(n, oh, ow, c, q, q).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(dx.reshape(n, h, w, c))


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its logit gradient.

    Log-sum-exp stabilized; the gradient is (softmax - onehot) / batch,
    so each gradient row sums to zero.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    n, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelOutOfRange(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def sgd_update(params: ParameterSet, grads: GradientSet, lr: float) -> ParameterSet:
    """One step of w' = w - lr * g; returns a fresh set, version + 1."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    check_congruent(params, grads)
    entries = [
        (name, value - lr * grad)
        for (name, value), (_, grad) in zip(params.entries, grads.entries)
    ]
    return ParameterSet(entries, params.version + 1)


def stack_forward(
    layers: list[LayerSpec], params: ParameterSet, x: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run layers in order; returns the output and each layer's input."""
    inputs = []
    out = x
    for layer in layers:
        inputs.append(out)
        out = layer_forward(layer, out, params)
    return out, inputs


def stack_backward(
    layers: list[LayerSpec],
    params: ParameterSet,
    inputs: list[np.ndarray],
    upstream: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, GradientSet]:
    """Backpropagate through a stack with cached per-layer inputs.

    `need_input_grad=False` skips the first layer's input gradient (the
    stack sits at the raw-data boundary, so nothing consumes it).
    """
    entries: list[tuple[str, np.ndarray]] = []
    grad = upstream
    for position, (layer, layer_in) in enumerate(zip(reversed(layers), reversed(inputs))):
        last = position == len(layers) - 1
        grad, layer_grads = layer_backward(
            layer, layer_in, grad, params, need_input_grad or not last
        )
        entries = layer_grads.entries + entries
    return grad, GradientSet(entries)


def zero_grads(params: ParameterSet) -> GradientSet:
    return GradientSet([(name, np.zeros_like(value)) for name, value in params.entries])


def init_layer_params(
    layer: LayerSpec, rng: np.random.Generator, scheme: str = "xavier"
) -> list[tuple[str, np.ndarray]]:
    """Xavier-uniform (default) or Gaussian(0, 0.01) weights; zero biases."""
    entries = []
    for name, shape in layer.param_shapes():
        if name.endswith(".bias"):
            entries.append((name, np.zeros(shape)))
            continue
        if layer.kind == "dense":
            fan_in, fan_out = layer.in_features, layer.out_features
        else:
            fan_in = layer.kernel * layer.kernel * layer.in_channels
            fan_out = layer.kernel * layer.kernel * layer.out_channels
        if scheme == "xavier":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            entries.append((name, rng.uniform(-limit, limit, size=shape)))
        elif scheme == "gaussian":
            entries.append((name, rng.normal(0.0, 0.01, size=shape)))
        else:
            raise ValueError(f"unknown init scheme: {scheme}")
    return entries


def scale_params(params: ParameterSet, factor: float) -> ParameterSet:
    return ParameterSet([(n, v * factor) for n, v in params.entries], params.version)


def add_scaled(acc: ParameterSet, other: ParameterSet, factor: float) -> ParameterSet:
    if [n for n, _ in acc.entries] != [n for n, _ in other.entries]:
        raise ShapeMismatch("parameter sets are not aligned by name")
    entries = [
        (name, a + factor * b)
        for (name, a), (_, b) in zip(acc.entries, other.entries)
    ]
    return ParameterSet(entries, acc.version)


def params_allclose(a: ParameterSet, b: ParameterSet, rtol: float = 0.0) -> bool:
    if a.names() != b.names():
        return False
    for (_, va), (_, vb) in zip(a.entries, b.entries):
        if va.shape != vb.shape:
            return False
        if rtol == 0.0:
            if not np.array_equal(va, vb):
                return False
        elif not np.allclose(va, vb, rtol=rtol, atol=0.0):
            return False
    return True


def max_rel_diff(a: ParameterSet, b: ParameterSet) -> float:
    worst = 0.0
    for (_, va), (_, vb) in zip(a.entries, b.entries):
        denom = np.maximum(np.maximum(np.abs(va), np.abs(vb)), 1e-12)
        worst = max(worst, float(np.max(np.abs(va - vb) / denom)))
    return worst
