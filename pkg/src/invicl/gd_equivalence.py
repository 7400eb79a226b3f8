"""Linear self-attention on the duplicated prompt, compared against explicit optimisers.

Tokens are columns ``z = (x; y)`` of ``Z`` with shape (d + 1, 2n + 1): first
copies, second copies, then the query ``(x_t; 0)``. The attention weights are
the fixed block matrices that turn one layer into one gradient step on the
squared loss, so the query's last coordinate can be read back as
``x_t^T w`` for an implied weight vector ``w``.

Two update timings are supported:

``"fresh"``
    The query reads the second copies after their leave-one-out update in
    the same layer, and the second copies read the first copies as they were
    before the layer. A single layer then reproduces one step of the
    leave-one-out recurrence exactly.
``"stale"``
    Every source is read as it was before the layer, and a second copy also
    reads its own running state alongside the other examples' first copies.
    With one example this reproduces plain gradient descent at every depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tasks import oracle_gd, oracle_invicl_recurrence

TIMINGS = ("stale", "fresh")


@dataclass(frozen=True)
class LinearAttnParams:
    eta: float
    w0: np.ndarray

    @property
    def d(self) -> int:
        return len(self.w0)

    @property
    def W_q(self) -> np.ndarray:
        m = np.zeros((self.d + 1, self.d + 1))
        m[: self.d, : self.d] = np.eye(self.d)
        return m

    W_k = W_q

    @property
    def W_v(self) -> np.ndarray:
        m = np.zeros((self.d + 1, self.d + 1))
        m[self.d, : self.d] = self.w0
        m[self.d, self.d] = -1.0
        return m

    @property
    def P(self) -> np.ndarray:
        return self.eta * np.eye(self.d + 1)


def initial_state(X: np.ndarray, y: np.ndarray, x_t: np.ndarray, duplicated: bool = True) -> np.ndarray:
    ctx = np.vstack([np.asarray(X, dtype=np.float64).T, np.asarray(y, dtype=np.float64)[None]])
    q = np.append(np.asarray(x_t, dtype=np.float64), 0.0)[:, None]
    blocks = [ctx, ctx.copy(), q] if duplicated else [ctx, q]
    return np.hstack(blocks)


def _messages(params: LinearAttnParams, sources: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Columns ``P W_v sum_i w[i, j] z_i (z_i^T W_k^T W_q z_j)`` for each target j."""
    scores = sources.T @ params.W_k.T @ params.W_q @ targets
    return params.P @ params.W_v @ sources @ (weights * scores)


def loo_linear_layer(params: LinearAttnParams, Z: np.ndarray, timing: str = "fresh") -> np.ndarray:
    if timing not in TIMINGS:
        raise ValueError(f"timing must be one of {TIMINGS}")
    n = (Z.shape[1] - 1) // 2
    first, second, query = Z[:, :n], Z[:, n : 2 * n], Z[:, 2 * n :]
    loo = ~np.eye(n, dtype=bool)

    new_first = first + _messages(params, first, first, np.eye(n))
    new_second = second + _messages(params, first, second, loo)
    if timing == "stale":
        new_second = new_second + _messages(params, second, second, np.eye(n))
        query_src = second
    else:
        query_src = new_second
    new_query = query + _messages(params, query_src, query, np.ones((n, 1)))
    return np.hstack([new_first, new_second, new_query])


def prefix_linear_layer(params: LinearAttnParams, Z: np.ndarray) -> np.ndarray:
    """Full-attention layer on an undecorated prompt (n contexts + query)."""
    n = Z.shape[1] - 1
    ctx = Z[:, :n]
    return Z + _messages(params, ctx, Z, np.ones((n, n + 1)))


def readout(z_query: np.ndarray, w0: np.ndarray) -> float:
    """x_t^T w0 minus the accumulated label coordinate."""
    d = len(w0)
    return float(w0 @ np.ascontiguousarray(z_query[:d]) - z_query[d])


@dataclass
class EquivalenceReport:
    timing: str
    eta: float
    readouts: np.ndarray
    dev_invicl: np.ndarray
    dev_gd: np.ndarray

    @property
    def max_abs_dev(self) -> float:
        return float(self.dev_invicl.max())

    @property
    def layers(self) -> int:
        return len(self.readouts)


def run_layers(X, y, x_t, eta: float, layers: int, timing: str = "fresh", w0=None) -> np.ndarray:
    """Query readout after each of ``layers`` stacked layers."""
    w0 = np.zeros(np.shape(X)[1]) if w0 is None else np.asarray(w0, dtype=np.float64)
    params = LinearAttnParams(eta, w0)
    Z = initial_state(X, y, x_t)
    out = []
    for _ in range(layers):
        Z = loo_linear_layer(params, Z, timing)
        out.append(readout(Z[:, -1], w0))
    return np.array(out)


def verify_equivalence(X, y, x_t, eta: float, layers: int, timing: str = "fresh", w0=None) -> EquivalenceReport:
    """Per-layer gap between the layered readout and x_t^T w_l from the explicit recurrences."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    w0 = np.zeros(np.shape(X)[1]) if w0 is None else np.asarray(w0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    got = run_layers(X, y, x_t, eta, layers, timing, w0)
    loo = np.array([w @ x_t for w in oracle_invicl_recurrence(X, y, eta, layers, w0)[1:]])
    gd = np.array([w @ x_t for w in oracle_gd(X, y, eta, layers, w0)[1:]])
    return EquivalenceReport(timing, eta, got, np.abs(got - loo), np.abs(got - gd))


def random_problem(seed: int, n: int, d: int):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = X @ rng.standard_normal(d)
    return X, y, rng.standard_normal(d), rng.standard_normal(d)
