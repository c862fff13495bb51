"""Small numpy substrate for dilated convolution stacks.

Arrays are laid out ``(batch, angle, radius, slice, channel)``.  Convolutions
are *valid* (no padding) dilated cross-correlations, so every layer shrinks
each spatial axis by ``dilation * (kernel - 1)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("linear", "leaky", "softplus")


@dataclass
class ConvLayer:
    """One dilated convolution plus activation.

    ``weight`` has shape ``(k_angle, k_radius, k_slice, in_ch, out_ch)``.
    """

    weight: np.ndarray
    bias: np.ndarray
    dilation: tuple[int, int, int] = (1, 1, 1)
    activation: str = "leaky"

    def __post_init__(self):
        self.dilation = tuple(int(d) for d in self.dilation)
        if self.weight.ndim != 5:
            raise ValueError("weight must be (k_angle, k_radius, k_slice, in_ch, out_ch)")
        if any(k % 2 == 0 for k in self.weight.shape[:3]):
            raise ValueError(f"kernel dims must be odd, got {self.weight.shape[:3]}")
        if any(d < 1 for d in self.dilation):
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[4],):
            raise ValueError("bias must have one entry per output channel")

    @property
    def kernel(self) -> tuple[int, int, int]:
        return tuple(self.weight.shape[:3])

    @property
    def in_channels(self) -> int:
        return self.weight.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[4]

    def footprint(self) -> tuple[int, int, int]:
        """Shrinkage of each spatial axis caused by this layer."""
        return tuple(d * (k - 1) for d, k in zip(self.dilation, self.kernel))

    def taps(self):
        ka, kr, ks = self.kernel
        da, dr, ds = self.dilation
        for a in range(ka):
            for r in range(kr):
                for s in range(ks):
                    yield a * da, r * dr, s * ds


def _activate(z, kind):
    if kind == "linear":
        return z
    if kind == "leaky":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    # numerically stable softplus
    return np.logaddexp(0, z)


def _activation_grad(z, kind):
    if kind == "linear":
        return np.ones_like(z)
    if kind == "leaky":
        return np.where(z > 0, 1.0, LEAKY_SLOPE).astype(z.dtype)
    # d softplus / dz = sigmoid(z)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _output_shape(x_shape, layer):
    spatial = []
    for size, shrink in zip(x_shape[1:4], layer.footprint()):
        out = size - shrink
        if out < 1:
            raise ValueError(
                f"input spatial extent {tuple(x_shape[1:4])} is smaller than the dilated "
                f"kernel footprint; need at least {tuple(f + 1 for f in layer.footprint())}"
            )
        spatial.append(out)
    return tuple(spatial)


def _im2col(x, layer, out_spatial):
    ao, ro, so = out_spatial
    cols = [x[:, a:a + ao, r:r + ro, s:s + so, :] for a, r, s in layer.taps()]
    return np.concatenate(cols, axis=-1)


def conv_forward(x: np.ndarray, layer: ConvLayer, return_cache: bool = False):
    """Valid dilated cross-correlation followed by the layer activation."""
    if x.ndim != 5:
        raise ValueError("input must be (batch, angle, radius, slice, channel)")
    if x.shape[4] != layer.in_channels:
        raise ValueError(f"expected {layer.in_channels} input channels, got {x.shape[4]}")
    out_spatial = _output_shape(x.shape, layer)
    cols = _im2col(x, layer, out_spatial)
    w2d = layer.weight.reshape(-1, layer.out_channels)
    z = cols.reshape(-1, w2d.shape[0]) @ w2d + layer.bias
    z = z.reshape(x.shape[0], *out_spatial, layer.out_channels)
    y = _activate(z, layer.activation)
    if return_cache:
        return y, (x.shape, cols, z)
    return y


def conv_backward(grad_y, layer: ConvLayer, cache, need_input_grad: bool = True):
    """Gradients w.r.t. input, weight and bias for one layer."""
    x_shape, cols, z = cache
    gz = grad_y * _activation_grad(z, layer.activation)
    cout = layer.out_channels
    gz2d = gz.reshape(-1, cout)
    cols2d = cols.reshape(gz2d.shape[0], -1)
    g_weight = (cols2d.T @ gz2d).reshape(layer.weight.shape)
    g_bias = gz2d.sum(axis=0)

    if not need_input_grad:
        return None, g_weight, g_bias
    w2d = layer.weight.reshape(-1, cout)
    gcols = (gz2d @ w2d.T).reshape(*gz.shape[:4], -1, layer.in_channels)
    gx = np.zeros(x_shape, dtype=grad_y.dtype)
    ao, ro, so = gz.shape[1:4]
    for t, (a, r, s) in enumerate(layer.taps()):
        gx[:, a:a + ao, r:r + ro, s:s + so, :] += gcols[..., t, :]
    return gx, g_weight, g_bias


@dataclass
class Network:
    """Sequential stack of :class:`ConvLayer`."""

    layers: list[ConvLayer]
    meta: dict = field(default_factory=dict)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def astype(self, dtype) -> "Network":
        layers = [
            ConvLayer(l.weight.astype(dtype), l.bias.astype(dtype), l.dilation, l.activation)
            for l in self.layers
        ]
        return Network(layers, dict(self.meta))

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    def footprint(self) -> tuple[int, int, int]:
        return tuple(int(sum(f)) for f in zip(*(l.footprint() for l in self.layers)))

    def forward(self, x):
        for layer in self.layers:
            x = conv_forward(x, layer)
        return x

    def forward_train(self, x):
        caches = []
        for layer in self.layers:
            x, cache = conv_forward(x, layer, return_cache=True)
            caches.append(cache)
        return x, caches

    def backward(self, grad_out, caches, need_input_grad: bool = False):
        """Return parameter gradients (same order as :meth:`params`) and input gradient."""
        grads = []
        g = grad_out
        n = len(self.layers)
        for i, (layer, cache) in enumerate(zip(reversed(self.layers), reversed(caches))):
            first = i == n - 1
            g, gw, gb = conv_backward(g, layer, cache, need_input_grad or not first)
            grads.extend([gb, gw])
        grads.reverse()
        return grads, g


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0):
    """Mean smooth-L1 loss and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = pred - target
    ad = np.abs(d)
    small = ad < beta
    per = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(small, d / beta, np.sign(d)) / d.size
    return float(per.mean()), grad.astype(pred.dtype)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=None):
    """Bias-corrected Adam update, applied in place.  Returns ``(params, state)``."""
    t = state.t + 1 if t is None else int(t)
    if t < 1:
        raise ValueError("step counter t must be >= 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    state.t = t
    return params, state


def _kink_pattern(net: Network, x) -> list[np.ndarray]:
    """Sign pattern of every leaky pre-activation."""
    _, caches = net.forward_train(x)
    return [c[2] > 0 for layer, c in zip(net.layers, caches) if layer.activation == "leaky"]


def grad_check(network: Network, x, target, eps: float = 1e-4, beta: float = 1.0,
               return_all: bool = False, skip_kinks: bool = True):
    """Compare backprop gradients with central finite differences.

    Runs in float64.  The relative error of one parameter is
    ``|fd - bp| / max(|fd| + |bp|, 1e-10)``; the maximum over all parameters
    is returned (and the full per-parameter arrays if ``return_all``).

    With ``skip_kinks`` a parameter whose ``+-eps`` perturbation flips any
    leaky pre-activation sign is left out (its error is NaN): the central
    difference then straddles a kink and estimates no derivative.
    """
    net = network.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)

    out, caches = net.forward_train(x)
    _, g_out = smooth_l1(out, target, beta)
    analytic, _ = net.backward(g_out, caches)
    base = _kink_pattern(net, x) if skip_kinks else None

    def loss_and_kink(xx):
        if not skip_kinks:
            return smooth_l1(net.forward(xx), target, beta)[0], False
        o, cs = net.forward_train(xx)
        pattern = [c[2] > 0 for layer, c in zip(net.layers, cs) if layer.activation == "leaky"]
        flipped = any(np.any(a != b) for a, b in zip(pattern, base))
        return smooth_l1(o, target, beta)[0], flipped

    errors = []
    for p, g in zip(net.params(), analytic):
        err = np.zeros(p.shape)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, kp = loss_and_kink(x)
            flat[i] = orig - eps
            lm, km = loss_and_kink(x)
            flat[i] = orig
            if kp or km:
                err.reshape(-1)[i] = np.nan
                continue
            fd = (lp - lm) / (2 * eps)
            err.reshape(-1)[i] = abs(fd - gflat[i]) / max(abs(fd) + abs(gflat[i]), 1e-10)
        errors.append(err)
    finite = [e[np.isfinite(e)] for e in errors]
    worst = max((float(e.max()) for e in finite if e.size), default=0.0)
    return (worst, errors) if return_all else worst


def save_network(net: Network, directory, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus a little-endian ``weights.bin`` blob.

    Weights are stored per layer as ``(out, in, k_angle, k_radius, k_slice)``
    followed by the bias.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs, specs, offset = [], [], 0
    for layer in net.layers:
        w = np.ascontiguousarray(layer.weight.transpose(4, 3, 0, 1, 2), dtype="<f4")
        b = np.ascontiguousarray(layer.bias, dtype="<f4")
        specs.append({
            "shape": list(w.shape),
            "dilation": list(layer.dilation),
            "activation": layer.activation,
            "weight_offset": offset,
            "bias_offset": offset + w.size,
        })
        offset += w.size + b.size
        blobs.extend([w.tobytes(), b.tobytes()])
    manifest = {"format": "polarring-weights", "dtype": "f32le", "layers": specs,
                "meta": net.meta}
    if extra:
        manifest.update(extra)
    (directory / "weights.bin").write_bytes(b"".join(blobs))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_network(directory) -> tuple[Network, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = np.frombuffer((directory / "weights.bin").read_bytes(), dtype="<f4")
    layers = []
    for spec in manifest["layers"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape))
        w = blob[spec["weight_offset"]:spec["weight_offset"] + n].reshape(shape)
        b = blob[spec["bias_offset"]:spec["bias_offset"] + shape[0]]
        layers.append(ConvLayer(
            np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)).astype(np.float32),
            b.astype(np.float32),
            tuple(spec["dilation"]),
            spec["activation"],
        ))
    return Network(layers, manifest.get("meta", {})), manifest
