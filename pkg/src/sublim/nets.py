"""Classical controls: ReLU MLPs and the single-conv MicroCNN.

Both pack their weights into one flat vector (layer by layer, weight matrix
row-major then bias) and implement hand-written backprop and forward-mode
products under the :class:`~sublim.base.ModelHandle` contract. The ReLU
derivative at exactly zero is taken to be 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import AUX_LAYOUT, TASK_LAYOUT, ModelHandle
from .errors import ShapeError


def _layout_for_outputs(n_out):
    if n_out == 16:
        return AUX_LAYOUT
    if n_out == 20:
        return TASK_LAYOUT
    raise ShapeError(f"output size must be 16 (aux) or 20 (task), got {n_out}")


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        _layout_for_outputs(sizes[-1])

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


@dataclass(frozen=True)
class CnnConfig:
    filters: int = 1
    kernel: int = 7
    stride: int = 7
    image_size: int = 28
    n_out: int = 20

    def __post_init__(self):
        if self.filters < 1:
            raise ShapeError("filters must be >= 1")
        if self.kernel != self.stride or self.image_size % self.kernel:
            raise ShapeError("MicroCNN supports non-overlapping kernels that tile the image")
        _layout_for_outputs(self.n_out)

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    @property
    def n_params(self) -> int:
        f, k = self.filters, self.kernel
        return f * (k * k + 1) + self.grid**2 * f * self.n_out + self.n_out


def param_count(config) -> int:
    """Trainable parameter count of an MLP, MicroCNN or QNN config (or model)."""
    if hasattr(config, "n_params"):
        return int(config.n_params)
    raise ShapeError(f"cannot count parameters of {config!r}")


def glorot_uniform(rng, fan_in, fan_out, size):
    """Weights from U(-b, b) with b = sqrt(6 / (fan_in + fan_out)); biases start at 0.

    Zero biases matter here: inputs live in [-1, 1] with a -1 background, so
    random biases on top of that offset leave many hidden units stuck on or
    off from the first step.
    """
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=size)


def _split(params, shapes):
    out, i = [], 0
    for shp in shapes:
        n = int(np.prod(shp))
        out.append(params[i:i + n].reshape(shp))
        i += n
    return out


class MLPModel(ModelHandle):
    """Fully connected ReLU network, e.g. ``MLPModel([784, 128, 16])``."""

    def __init__(self, layer_sizes=(784, 128, 16)):
        self.config = MlpConfig(tuple(layer_sizes))
        self.layer_sizes = self.config.layer_sizes
        self.layout = _layout_for_outputs(self.layer_sizes[-1])
        self.n_params = self.config.n_params
        self.input_dim = self.layer_sizes[0]
        self._shapes = []
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self._shapes += [(a, b), (b,)]

    def get_config(self):
        return {"kind": "mlp", "layer_sizes": list(self.layer_sizes)}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["layer_sizes"])

    def init_params(self, rng):
        chunks = []
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            chunks += [glorot_uniform(rng, a, b, a * b), np.zeros(b)]
        return np.concatenate(chunks)

    def _forward_cache(self, X, params):
        ws = _split(params, self._shapes)
        acts, pre = [X], []
        a = X
        n_layers = len(ws) // 2
        for li in range(n_layers):
            z = a @ ws[2 * li] + ws[2 * li + 1]
            pre.append(z)
            a = np.maximum(z, 0.0) if li < n_layers - 1 else z
            acts.append(a)
        return a, (acts, pre)

    def _vjp_cached(self, cache, params, cot):
        acts, pre = cache
        ws = _split(params, self._shapes)
        grads = [None] * len(ws)
        delta = cot
        for li in range(len(pre) - 1, -1, -1):
            grads[2 * li] = acts[li].T @ delta
            grads[2 * li + 1] = delta.sum(axis=0)
            if li:
                delta = (delta @ ws[2 * li].T) * (pre[li - 1] > 0)
        return np.concatenate([g.ravel() for g in grads])

    def _jvp_cached(self, cache, params, tangent):
        acts, pre = cache
        ws = _split(params, self._shapes)
        dws = _split(np.asarray(tangent, dtype=np.float64), self._shapes)
        da = None
        for li in range(len(pre)):
            dz = acts[li] @ dws[2 * li] + dws[2 * li + 1]
            if da is not None:
                dz = dz + da @ ws[2 * li]
            da = dz * (pre[li] > 0) if li < len(pre) - 1 else dz
        return da


class MicroCNNModel(ModelHandle):
    """One strided convolution, ReLU, and a dense head to 20 logits.

    The 28x28 input is cut into a 4x4 grid of non-overlapping 7x7 patches;
    features are flattened filter-major before the dense layer.
    """

    def __init__(self, filters=1):
        self.config = CnnConfig(filters=int(filters))
        self.filters = self.config.filters
        self.layout = TASK_LAYOUT
        self.n_params = self.config.n_params
        self.input_dim = self.config.image_size**2
        c = self.config
        self._shapes = [(c.filters, c.kernel**2), (c.filters,), (c.grid**2 * c.filters, c.n_out), (c.n_out,)]

    def get_config(self):
        return {"kind": "cnn", "filters": self.filters}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["filters"])

    def init_params(self, rng):
        c = self.config
        k2 = c.kernel**2
        fan_in = self._shapes[2][0]
        return np.concatenate([
            glorot_uniform(rng, k2, k2 * c.filters, k2 * c.filters), np.zeros(c.filters),
            glorot_uniform(rng, fan_in, c.n_out, fan_in * c.n_out), np.zeros(c.n_out),
        ])

    def _patches(self, X):
        c = self.config
        g, k = c.grid, c.kernel
        return X.reshape(-1, g, k, g, k).transpose(0, 1, 3, 2, 4).reshape(-1, g * g, k * k)

    def _forward_cache(self, X, params):
        wc, bc, wd, bd = _split(params, self._shapes)
        P = self._patches(X)
        z = P @ wc.T + bc  # (batch, positions, filters)
        h = np.maximum(z, 0.0).transpose(0, 2, 1).reshape(len(X), -1)
        return h @ wd + bd, (P, z, h)

    def _vjp_cached(self, cache, params, cot):
        P, z, h = cache
        _, _, wd, _ = _split(params, self._shapes)
        g_wd = h.T @ cot
        g_bd = cot.sum(axis=0)
        dh = (cot @ wd.T).reshape(len(cot), self.filters, -1).transpose(0, 2, 1)
        dz = dh * (z > 0)
        g_wc = np.einsum("bpf,bpk->fk", dz, P)
        g_bc = dz.sum(axis=(0, 1))
        return np.concatenate([g_wc.ravel(), g_bc, g_wd.ravel(), g_bd])

    def _jvp_cached(self, cache, params, tangent):
        P, z, h = cache
        _, _, wd, _ = _split(params, self._shapes)
        dwc, dbc, dwd, dbd = _split(np.asarray(tangent, dtype=np.float64), self._shapes)
        dz = (P @ dwc.T + dbc) * (z > 0)
        dh = dz.transpose(0, 2, 1).reshape(len(P), -1)
        return dh @ wd + h @ dwd + dbd
