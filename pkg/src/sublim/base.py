"""Shared differentiable-model contract.

Every model (QNN, MLP, MicroCNN) maps a batch of inputs and a flat parameter
vector to a batch of logits and exposes exact reverse (``vjp``) and forward
(``jvp``) products, so training and diagnostics never care which family they
are driving.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class LogitLayout:
    """Named, half-open index ranges into the logit vector."""

    n_logits: int
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, (lo, hi) in self.blocks.items():
            if not 0 <= lo < hi <= self.n_logits:
                raise ShapeError(f"block {name!r}=({lo}, {hi}) outside 0..{self.n_logits}")

    def block(self, name: str) -> tuple[int, int]:
        try:
            return tuple(self.blocks[name])
        except KeyError:
            raise ShapeError(f"layout has no {name!r} block (has {sorted(self.blocks)})") from None

    def to_dict(self) -> dict:
        return {"n_logits": self.n_logits, "blocks": {k: list(v) for k, v in self.blocks.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "LogitLayout":
        return cls(int(d["n_logits"]), {k: tuple(v) for k, v in d["blocks"].items()})


AUX_LAYOUT = LogitLayout(16, {"mnist": (0, 10), "aux": (10, 16)})
TASK_LAYOUT = LogitLayout(20, {"mnist": (0, 10), "fashion": (10, 20)})


def layout_for(protocol: str) -> LogitLayout:
    if protocol == "aux":
        return AUX_LAYOUT
    if protocol == "task":
        return TASK_LAYOUT
    raise ShapeError(f"unknown protocol {protocol!r}")


LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class ModelHandle:
    """Base class for differentiable models over a flat ``ParamVector``.

    Subclasses implement ``_forward_cache``, ``_vjp_cached`` and ``_jvp_cached``
    on 2-D input batches. Public methods accept either one input vector or a
    batch, and process large batches in fixed-size chunks whose partial
    gradients are summed in a fixed order (bit-deterministic).
    """

    family: str = "classical"
    chunk_size: int = 512

    n_params: int
    layout: LogitLayout
    input_dim: int

    # -- hooks ---------------------------------------------------------------
    def _forward_cache(self, X, params):
        raise NotImplementedError

    def _vjp_cached(self, cache, params, cot):
        raise NotImplementedError

    def _jvp_cached(self, cache, params, tangent):
        raise NotImplementedError

    def _jvp(self, X, params, tangent):
        return self._jvp_cached(self._forward_cache(X, params)[1], params, tangent)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def get_config(self) -> dict:
        raise NotImplementedError

    # -- public surface -------------------------------------------------------
    @property
    def n_logits(self) -> int:
        return self.layout.n_logits

    def _check(self, X, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {params.shape}")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2:
            raise ShapeError(f"inputs must be 1-D or 2-D, got {X.ndim}-D")
        if X.shape[1] > self.input_dim or (self.family == "classical" and X.shape[1] != self.input_dim):
            raise ShapeError(f"input length {X.shape[1]} incompatible with model input {self.input_dim}")
        return X, params, single

    def _chunks(self, n):
        for lo in range(0, n, self.chunk_size):
            yield slice(lo, min(n, lo + self.chunk_size))

    def forward(self, X, params) -> np.ndarray:
        X, params, single = self._check(X, params)
        out = np.concatenate([self._forward_cache(X[s], params)[0] for s in self._chunks(len(X))])
        return out[0] if single else out

    def vjp(self, X, params, cot) -> np.ndarray:
        """Return ``J^T cot`` summed over the batch."""
        X, params, single = self._check(X, params)
        cot = np.asarray(cot, dtype=np.float64)
        if single:
            cot = cot[None, :]
        if cot.shape != (len(X), self.n_logits):
            raise ShapeError(f"cotangent shape {cot.shape} != {(len(X), self.n_logits)}")
        grad = np.zeros(self.n_params)
        for s in self._chunks(len(X)):
            _, cache = self._forward_cache(X[s], params)
            grad += self._vjp_cached(cache, params, cot[s])
        return grad

    def jvp(self, X, params, tangent) -> np.ndarray:
        """Return ``J tangent`` per input, shape ``(batch, n_logits)``."""
        X, params, single = self._check(X, params)
        tangent = np.asarray(tangent, dtype=np.float64)
        if tangent.shape != (self.n_params,):
            raise ShapeError(f"tangent shape {tangent.shape} != ({self.n_params},)")
        out = np.concatenate([self._jvp(X[s], params, tangent) for s in self._chunks(len(X))])
        return out[0] if single else out

    def value_and_grad(self, X, params, loss_fn: LossFn):
        """Evaluate ``loss_fn(logits)`` and its parameter gradient in one pass.

        ``loss_fn`` receives the whole batch of logits and returns
        ``(loss, d loss / d logits)``.
        """
        X, params, single = self._check(X, params)
        if len(X) > self.chunk_size:
            logits = self.forward(X, params)
            loss, cot = loss_fn(logits)
            return loss, self.vjp(X, params, cot)
        logits, cache = self._forward_cache(X, params)
        loss, cot = loss_fn(logits[0] if single else logits)
        cot = np.asarray(cot, dtype=np.float64).reshape(logits.shape)
        return loss, self._vjp_cached(cache, params, cot)

    def linearize(self, X, params, block=None, max_cache_bytes: float = 1.5e9) -> "Linearization":
        """Freeze the model at ``params`` over the inputs ``X``.

        ``block`` restricts the rows to one logit range. Forward caches are
        kept in memory when they fit in ``max_cache_bytes``; otherwise each
        product recomputes them.
        """
        X, params, _ = self._check(X, params)
        return Linearization(self, X, params, max_cache_bytes, block)

    def jtj(self, X, params, v) -> np.ndarray:
        """Gauss-Newton product ``J^T J v`` stacked over all inputs in ``X``."""
        return self.linearize(X, params, max_cache_bytes=0).jtj(v)

    def preprocess(self, pixels) -> np.ndarray:
        """Map raw [0, 1] pixels to this model's input convention."""
        from .data import normalize_for_model

        return normalize_for_model(pixels, self.family)

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_config().items() if k != "kind")
        return f"{type(self).__name__}({args})"


def model_from_config(cfg: dict) -> ModelHandle:
    """Rebuild a model from ``get_config()`` output."""
    kind = cfg.get("kind")
    if kind == "qnn":
        from .qsim import QNNModel

        return QNNModel.from_config(cfg)
    if kind == "mlp":
        from .nets import MLPModel

        return MLPModel.from_config(cfg)
    if kind == "cnn":
        from .nets import MicroCNNModel

        return MicroCNNModel.from_config(cfg)
    if kind == "linear":
        from .toy import LinearModel

        return LinearModel(cfg["n_params"], cfg["n_logits"])
    raise ShapeError(f"unknown model kind {kind!r}")


def _nbytes(obj) -> int:
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, (list, tuple)):
        return sum(_nbytes(o) for o in obj)
    if isinstance(obj, dict):
        return sum(_nbytes(o) for o in obj.values())
    return 0


class Linearization:
    """Jacobian of a model's logits at a fixed point over a fixed input set.

    ``J`` stacks, for every input in order, the rows of the logits in
    ``block`` (all logits by default). All products reduce over chunks in
    input order.
    """

    def __init__(self, model: ModelHandle, X, params, max_cache_bytes=1.5e9, block=None):
        self.model = model
        self.X = X
        self.params = params
        self.block = tuple(block) if block is not None else (0, model.n_logits)
        lo, hi = self.block
        if not 0 <= lo < hi <= model.n_logits:
            raise ShapeError(f"block {self.block} outside the {model.n_logits} logits")
        self.slices = list(model._chunks(len(X)))
        self._caches = None
        first = model._forward_cache(X[self.slices[0]], params)[1] if self.slices else None
        if first is not None and _nbytes(first) * len(self.slices) <= max_cache_bytes:
            self._caches = [first] + [model._forward_cache(X[s], params)[1] for s in self.slices[1:]]

    @property
    def rows_per_input(self) -> int:
        return self.block[1] - self.block[0]

    @property
    def shape(self):
        return (len(self.X) * self.rows_per_input, self.model.n_params)

    def _cache(self, i):
        if self._caches is not None:
            return self._caches[i]
        return self.model._forward_cache(self.X[self.slices[i]], self.params)[1]

    def _pad(self, U):
        full = np.zeros((len(U), self.model.n_logits))
        full[:, self.block[0]:self.block[1]] = U
        return full

    def jvp(self, v) -> np.ndarray:
        """``J v`` as an ``(n_inputs, rows_per_input)`` array."""
        v = np.asarray(v, dtype=np.float64)
        lo, hi = self.block
        return np.concatenate(
            [self.model._jvp_cached(self._cache(i), self.params, v)[:, lo:hi] for i in range(len(self.slices))]
        )

    def vjp(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=np.float64).reshape(len(self.X), self.rows_per_input)
        out = np.zeros(self.model.n_params)
        for i, s in enumerate(self.slices):
            out += self.model._vjp_cached(self._cache(i), self.params, self._pad(U[s]))
        return out

    def jtj(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        lo, hi = self.block
        out = np.zeros(self.model.n_params)
        for i in range(len(self.slices)):
            cache = self._cache(i)
            jv = self.model._jvp_cached(cache, self.params, v)
            if (lo, hi) != (0, self.model.n_logits):
                jv = self._pad(jv[:, lo:hi])
            out += self.model._vjp_cached(cache, self.params, jv)
        return out

    def dense(self) -> np.ndarray:
        """Materialize ``J`` (rows: input-major, then logit index)."""
        eye = np.eye(self.model.n_params)
        return np.stack([self.jvp(e).ravel() for e in eye], axis=1)
