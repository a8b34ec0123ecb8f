"""Linear toy model with an explicit Jacobian, for exact-oracle checks."""
from __future__ import annotations

import numpy as np

from .base import LogitLayout, ModelHandle


class LinearModel(ModelHandle):
    """``logits = A(x) @ params`` where the input ``x`` *is* ``A(x)``, flattened.

    Stacking the inputs of a public set row-wise therefore reproduces any
    chosen dense ``J`` exactly.
    """

    def __init__(self, n_params: int, n_logits: int = 1):
        self.n_params = int(n_params)
        self.layout = LogitLayout(int(n_logits), {"public": (0, int(n_logits))})
        self.input_dim = self.n_params * self.layout.n_logits

    @classmethod
    def from_jacobian(cls, J, rows_per_input: int = 1):
        J = np.asarray(J, dtype=np.float64)
        if J.shape[0] % rows_per_input:
            raise ValueError("row count must be a multiple of rows_per_input")
        model = cls(J.shape[1], rows_per_input)
        return model, J.reshape(-1, rows_per_input * J.shape[1])

    def init_params(self, rng):
        return rng.standard_normal(self.n_params)

    def get_config(self):
        return {"kind": "linear", "n_params": self.n_params, "n_logits": self.layout.n_logits}

    def _mats(self, X):
        return X.reshape(len(X), self.layout.n_logits, self.n_params)

    def _forward_cache(self, X, params):
        A = self._mats(X)
        return A @ params, A

    def _vjp_cached(self, cache, params, cot):
        return np.einsum("bij,bi->j", cache, cot)

    def _jvp_cached(self, cache, params, tangent):
        return cache @ tangent
