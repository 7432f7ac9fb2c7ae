"""Minimal deterministic CNN engine: forward, reverse-mode gradients, SGD, accounting.

Tensors are plain ``numpy.ndarray`` objects in binary32.  A model is an
ordered list of :class:`LayerSpec` plus one dict of parameter arrays per
layer.  Models are treated as immutable; every transform returns a copy.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._kernels import matmul_fixed

CONV = "Conv2D"
FC = "FullyConnected"
BATCHNORM = "BatchNorm"
RELU = "ReLU"
MAXPOOL = "MaxPool"
FLATTEN = "Flatten"
EDAC = "EDAC"
VOTER = "Voter"

LAYER_KINDS = (CONV, FC, BATCHNORM, RELU, MAXPOOL, FLATTEN, EDAC, VOTER)
PARAMETRIC = (CONV, FC)
TRAINABLE = {CONV: ("weight", "bias"), FC: ("weight", "bias"), BATCHNORM: ("weight", "bias")}

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


class StaleCacheError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    geometry: dict = field(default_factory=dict)
    has_bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    input_shape: tuple[int, ...]
    num_classes: int
    # free-form description carried through save/load (e.g. the hardening plan)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.params) != len(self.layers):
            raise ShapeError("params must hold one dict per layer")

    def copy(self) -> ModelGraph:
        return ModelGraph(
            layers=copy.deepcopy(self.layers),
            params=[{k: v.copy() for k, v in p.items()} for p in self.params],
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            meta=copy.deepcopy(self.meta),
        )

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without the batch axis)."""
        shapes = []
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            shape = output_shape(spec, shape, i)
            shapes.append(shape)
        return shapes

    def validate(self) -> None:
        shapes = self.layer_shapes()
        for i, spec in enumerate(self.layers):
            expected = param_shapes(spec)
            got = self.params[i]
            if set(expected) != set(got):
                raise ShapeError(
                    f"layer {i} ({spec.kind}): expected tensors {sorted(expected)}, got {sorted(got)}"
                )
            for name, shape in expected.items():
                if tuple(got[name].shape) != shape:
                    raise ShapeError(
                        f"layer {i} ({spec.kind}): {name} has shape {got[name].shape}, expected {shape}"
                    )
        if shapes and shapes[-1] != (self.num_classes,):
            raise ShapeError(f"final output shape {shapes[-1]} does not match num_classes={self.num_classes}")

    def parametric_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind in PARAMETRIC]

    def logit_layer(self) -> int:
        """Index of the last CONV/FC layer (the one producing logits)."""
        idx = self.parametric_layers()
        if not idx:
            raise ShapeError("model has no CONV/FC layer")
        return idx[-1]


def edac_physical_channels(groups: list[list[int]]) -> int:
    return sum(len(g) for g in groups)


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...], index: int = -1) -> tuple[int, ...]:
    g = spec.geometry
    where = f"layer {index} ({spec.kind})"
    if spec.kind == CONV:
        if len(in_shape) != 3 or in_shape[0] != g["in_channels"]:
            raise ShapeError(f"{where}: expected input [{g['in_channels']}, H, W], got {list(in_shape)}")
        kh, kw = g["kernel"]
        s, p = g.get("stride", 1), g.get("padding", 0)
        ho = (in_shape[1] + 2 * p - kh) // s + 1
        wo = (in_shape[2] + 2 * p - kw) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{where}: kernel larger than padded input {list(in_shape)}")
        return (g["out_channels"], ho, wo)
    if spec.kind == FC:
        if in_shape != (g["in_features"],):
            raise ShapeError(f"{where}: expected input [{g['in_features']}], got {list(in_shape)}")
        return (g["out_features"],)
    if spec.kind == BATCHNORM:
        if in_shape[0] != g["channels"]:
            raise ShapeError(f"{where}: expected {g['channels']} channels, got {list(in_shape)}")
        return in_shape
    if spec.kind == MAXPOOL:
        if len(in_shape) != 3:
            raise ShapeError(f"{where}: expected [C, H, W], got {list(in_shape)}")
        k, s = g["window"], g.get("stride", g["window"])
        ho, wo = (in_shape[1] - k) // s + 1, (in_shape[2] - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{where}: window larger than input {list(in_shape)}")
        return (in_shape[0], ho, wo)
    if spec.kind == FLATTEN:
        return (int(np.prod(in_shape)),)
    if spec.kind in (EDAC, VOTER):
        groups = g["groups"]
        if in_shape[0] != edac_physical_channels(groups):
            raise ShapeError(
                f"{where}: expected {edac_physical_channels(groups)} physical channels, got {list(in_shape)}"
            )
        return (len(groups),) + tuple(in_shape[1:])
    return in_shape  # ReLU


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Expected parameter tensors of a layer, in fault-injection order."""
    g = spec.geometry
    if spec.kind == CONV:
        out = {"weight": (g["out_channels"], g["in_channels"], *g["kernel"])}
        if spec.has_bias:
            out["bias"] = (g["out_channels"],)
        return out
    if spec.kind == FC:
        out = {"weight": (g["out_features"], g["in_features"])}
        if spec.has_bias:
            out["bias"] = (g["out_features"],)
        return out
    if spec.kind == BATCHNORM:
        c = (g["channels"],)
        return {"weight": c, "bias": c, "running_mean": c, "running_var": c}
    if spec.kind == EDAC:
        c = (len(g["groups"]),)
        return {"lower": c, "upper": c}
    return {}


def conv(in_channels, out_channels, kernel=3, stride=1, padding=0, bias=True) -> LayerSpec:
    k = [kernel, kernel] if isinstance(kernel, int) else list(kernel)
    return LayerSpec(
        CONV,
        {"in_channels": in_channels, "out_channels": out_channels, "kernel": k, "stride": stride, "padding": padding},
        has_bias=bias,
    )


def fc(in_features, out_features, bias=True) -> LayerSpec:
    return LayerSpec(FC, {"in_features": in_features, "out_features": out_features}, has_bias=bias)


def batchnorm(channels) -> LayerSpec:
    return LayerSpec(BATCHNORM, {"channels": channels})


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def maxpool(window=2, stride=None) -> LayerSpec:
    return LayerSpec(MAXPOOL, {"window": window, "stride": stride or window})


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def init_params(layers: list[LayerSpec], seed: int) -> list[dict[str, np.ndarray]]:
    """Kaiming-uniform (fan-in) weights, zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    params = []
    for spec in layers:
        shapes = param_shapes(spec)
        p = {}
        if spec.kind in PARAMETRIC:
            wshape = shapes["weight"]
            fan_in = int(np.prod(wshape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            p["weight"] = rng.uniform(-bound, bound, size=wshape).astype(np.float32)
            if "bias" in shapes:
                p["bias"] = np.zeros(shapes["bias"], dtype=np.float32)
        elif spec.kind == BATCHNORM:
            c = shapes["weight"]
            p = {
                "weight": np.ones(c, np.float32),
                "bias": np.zeros(c, np.float32),
                "running_mean": np.zeros(c, np.float32),
                "running_var": np.ones(c, np.float32),
            }
        else:
            p = {name: np.zeros(shape, np.float32) for name, shape in shapes.items()}
        params.append(p)
    return params


def build_model(layers: list[LayerSpec], input_shape, num_classes: int, seed: int = 0) -> ModelGraph:
    model = ModelGraph(list(layers), init_params(layers, seed), tuple(input_shape), num_classes)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardCache:
    model_id: int
    fingerprint: tuple
    training: bool
    entries: list = field(default_factory=list)
    # running statistics produced by training-mode batchnorm, keyed by layer index
    bn_updates: dict = field(default_factory=dict)


def _fingerprint(model: ModelGraph) -> tuple:
    return tuple((i, k, id(v)) for i, p in enumerate(model.params) for k, v in p.items())


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv_forward(x, spec, p):
    g = spec.geometry
    kh, kw = g["kernel"]
    cols, ho, wo = _im2col(x, kh, kw, g.get("stride", 1), g.get("padding", 0))
    w = p["weight"]
    out = matmul_fixed(cols, w.reshape(w.shape[0], -1).T)
    if "bias" in p:
        out += p["bias"]
    y = out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), cols


def _fc_forward(x, p):
    out = matmul_fixed(x, p["weight"].T)
    if "bias" in p:
        out += p["bias"]
    return out


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, x):
    return v.reshape((1, -1) + (1,) * (x.ndim - 2))


def _bn_forward(x, p, training):
    dt = x.dtype
    axes = _bn_axes(x)
    if training:
        mean = x.mean(axis=axes, dtype=dt)
        centered = x - _bn_view(mean, x)
        var = (centered * centered).mean(axis=axes, dtype=dt)
        inv = (1 / np.sqrt(var + dt.type(BN_EPS))).astype(dt)
    else:
        mean, var = p["running_mean"], p["running_var"]
        centered = x - _bn_view(mean, x)
        inv = (1 / np.sqrt(var + dt.type(BN_EPS))).astype(dt)
    xhat = centered * _bn_view(inv, x)
    y = xhat * _bn_view(p["weight"], x) + _bn_view(p["bias"], x)
    return y, xhat, inv, mean, var


def _maxpool_forward(x, spec):
    k, s = spec.geometry["window"], spec.geometry.get("stride", spec.geometry["window"])
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    flat = win.reshape(win.shape[:4] + (k * k,))
    return flat.max(axis=-1), flat.argmax(axis=-1)


def forward(
    model: ModelGraph,
    batch: np.ndarray,
    keep_cache: bool = False,
    training: bool = False,
    observer: Callable[[int, np.ndarray], None] | None = None,
):
    """Run ``batch`` through ``model``.

    Returns the logits, or ``(logits, cache)`` when ``keep_cache`` is set.
    ``training`` switches batchnorm to batch statistics.  ``observer`` is
    called with ``(layer_index, output)`` after every layer; it must not
    modify the array.
    Non-finite values propagate per IEEE-754; nothing traps.
    """
    from .edac import edac_apply, voter_apply

    x = np.asarray(batch)
    if x.dtype != np.float64:
        x = x.astype(np.float32, copy=False)
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"layer 0 ({model.layers[0].kind if model.layers else '-'}): batch shape "
                         f"{list(x.shape)} does not match model input {list(model.input_shape)}")
    cache = ForwardCache(id(model), _fingerprint(model), training) if keep_cache else None
    with np.errstate(all="ignore"):
        for i, spec in enumerate(model.layers):
            output_shape(spec, tuple(x.shape[1:]), i)
            p = model.params[i]
            aux = None
            x_in = x
            if spec.kind == CONV:
                x, aux = _conv_forward(x, spec, p)
            elif spec.kind == FC:
                x = _fc_forward(x, p)
            elif spec.kind == BATCHNORM:
                x, xhat, inv, mean, var = _bn_forward(x, p, training)
                aux = (xhat, inv)
                if training and cache is not None:
                    cache.bn_updates[i] = (mean, var, int(np.prod(x.shape)) // x.shape[1])
            elif spec.kind == RELU:
                x = np.maximum(x, x.dtype.type(0))
            elif spec.kind == MAXPOOL:
                x, aux = _maxpool_forward(x, spec)
            elif spec.kind == FLATTEN:
                x = x.reshape(x.shape[0], -1)
            elif spec.kind == EDAC:
                g = spec.geometry
                x = edac_apply(x, g["groups"], p["lower"], p["upper"], g.get("scope", "all-channels"))
            elif spec.kind == VOTER:
                x = voter_apply(x, spec.geometry["groups"])
            if cache is not None:
                cache.entries.append((x_in.shape, x_in if spec.kind in (FC, RELU) else None, aux))
            if observer is not None:
                observer(i, x)
    if keep_cache:
        return x, cache
    return x


# ---------------------------------------------------------------------------
# backward


def _col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    d = dcols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def backward(model: ModelGraph, cache: ForwardCache, output_grad: np.ndarray, per_sample: bool = False):
    """Gradients of ``<output_grad, logits>`` w.r.t. every trainable tensor.

    Returns a list with one dict per layer (empty for layers without
    trainable tensors).  With ``per_sample`` each gradient carries a leading
    batch axis; this is only defined for inference-mode caches.
    """
    if cache is None or cache.model_id != id(model) or cache.fingerprint != _fingerprint(model):
        raise StaleCacheError("cache was not produced by a forward pass of this model")
    if len(cache.entries) != len(model.layers):
        raise StaleCacheError("cache does not cover every layer of the model")
    if per_sample and cache.training:
        raise ValueError("per-sample gradients require an inference-mode cache")

    dy = np.asarray(output_grad)
    grads: list[dict[str, np.ndarray]] = [{} for _ in model.layers]
    for i in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[i]
        p = model.params[i]
        x_shape, x_in, aux = cache.entries[i]
        if spec.kind == CONV:
            g = spec.geometry
            kh, kw = g["kernel"]
            cols = aux
            n = x_shape[0]
            cout = p["weight"].shape[0]
            ho, wo = dy.shape[2], dy.shape[3]
            dym = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
            if per_sample:
                dyn = dym.reshape(n, ho * wo, cout)
                grads[i]["weight"] = (dyn.transpose(0, 2, 1) @ cols.reshape(n, ho * wo, -1)).reshape(
                    (n,) + p["weight"].shape
                )
                if "bias" in p:
                    grads[i]["bias"] = dyn.sum(axis=1)
            else:
                grads[i]["weight"] = (dym.T @ cols).reshape(p["weight"].shape)
                if "bias" in p:
                    grads[i]["bias"] = dym.sum(axis=0)
            if i > 0:
                dcols = dym @ p["weight"].reshape(cout, -1)
                dy = _col2im(dcols, x_shape, kh, kw, g.get("stride", 1), g.get("padding", 0), ho, wo)
        elif spec.kind == FC:
            if per_sample:
                grads[i]["weight"] = dy[:, :, None] * x_in[:, None, :]
                if "bias" in p:
                    grads[i]["bias"] = dy.copy()
            else:
                grads[i]["weight"] = dy.T @ x_in
                if "bias" in p:
                    grads[i]["bias"] = dy.sum(axis=0)
            dy = dy @ p["weight"]
        elif spec.kind == BATCHNORM:
            xhat, inv = aux
            axes = _bn_axes(dy)
            if per_sample:
                sample_axes = tuple(a for a in axes if a != 0)
                grads[i]["weight"] = (dy * xhat).sum(axis=sample_axes) if sample_axes else dy * xhat
                grads[i]["bias"] = dy.sum(axis=sample_axes) if sample_axes else dy.copy()
            else:
                grads[i]["weight"] = (dy * xhat).sum(axis=axes)
                grads[i]["bias"] = dy.sum(axis=axes)
            dxhat = dy * _bn_view(p["weight"], dy)
            if cache.training:
                m = dy.size // dy.shape[1]
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                dy = (_bn_view(inv, dy) / m) * (m * dxhat - _bn_view(s1, dy) - xhat * _bn_view(s2, dy))
            else:
                dy = dxhat * _bn_view(inv, dy)
        elif spec.kind == RELU:
            dy = dy * (x_in > 0)
        elif spec.kind == MAXPOOL:
            k = spec.geometry["window"]
            s = spec.geometry.get("stride", k)
            idx = aux
            ho, wo = idx.shape[2], idx.shape[3]
            dx = np.zeros(x_shape, dtype=dy.dtype)
            for a in range(k):
                for b in range(k):
                    mask = idx == a * k + b
                    dx[:, :, a : a + s * ho : s, b : b + s * wo : s] += dy * mask
            dy = dx
        elif spec.kind == FLATTEN:
            dy = dy.reshape(x_shape)
        else:
            raise NotImplementedError(f"backward through {spec.kind} layers is not supported")
    return grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels], dtype=np.float64))
    grad = ez / s
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype)


def sgd_step(model: ModelGraph, grads, lr: float) -> ModelGraph:
    """``params - lr * grads`` in binary32, on a copy."""
    out = model.copy()
    if lr == 0:
        return out
    step = np.float32(lr)
    for i, g in enumerate(grads):
        for name, gv in g.items():
            p = out.params[i][name]
            if gv.shape != p.shape:
                raise ShapeError(f"layer {i}: gradient {name} shape {gv.shape} != parameter shape {p.shape}")
            out.params[i][name] = (p - step * gv.astype(np.float32)).astype(np.float32)
    return out


def count_params_macs(model: ModelGraph) -> tuple[int, int]:
    """Stored parameter elements and multiply-accumulates for one input."""
    params = sum(int(v.size) for p in model.params for v in p.values())
    macs = 0
    shape = model.input_shape
    for i, spec in enumerate(model.layers):
        out = output_shape(spec, shape, i)
        g = spec.geometry
        if spec.kind == CONV:
            kh, kw = g["kernel"]
            macs += kh * kw * g["in_channels"] * g["out_channels"] * out[1] * out[2]
        elif spec.kind == FC:
            macs += g["in_features"] * g["out_features"]
        shape = out
    return params, macs
