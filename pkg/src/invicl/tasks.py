"""Synthetic regression episodes and closed-form reference solvers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

SPARSE_NONZERO = 3
SCALE_STD = 3.0
PINV_RCOND = 1e-10


class TaskKind(str, Enum):
    LINREG = "linreg"
    SPARSE = "sparse"


class OOD(str, Enum):
    NONE = "none"
    NOISE = "noise"
    SCALE = "scale"
    SUBSPACE = "subspace"


@dataclass(frozen=True)
class TaskConfig:
    kind: TaskKind = TaskKind.LINREG
    d: int = 5
    n: int = 10
    ood: OOD = OOD.NONE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        object.__setattr__(self, "ood", OOD(self.ood))
        if self.d < 1 or self.n < 0:
            raise ValueError(f"invalid task shape d={self.d}, n={self.n}")
        if self.kind is TaskKind.SPARSE and self.d < SPARSE_NONZERO:
            raise ValueError(f"sparse regression needs d >= {SPARSE_NONZERO}")

    def with_(self, **kw) -> "TaskConfig":
        return TaskConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return {k: (v.value if isinstance(v, Enum) else v) for k, v in asdict(self).items()}


@dataclass
class TaskInstance:
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    b: float
    x_t: np.ndarray
    y_t: float
    cfg: TaskConfig | None = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def permuted(self, perm) -> "TaskInstance":
        perm = np.asarray(perm)
        return TaskInstance(self.X[perm], self.y[perm], self.w, self.b, self.x_t, self.y_t, self.cfg)

    def truncated(self, n: int) -> "TaskInstance":
        return TaskInstance(self.X[:n], self.y[:n], self.w, self.b, self.x_t, self.y_t, self.cfg)

    def to_record(self) -> dict:
        return {
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "w": self.w.tolist(),
            "b": float(self.b),
            "x_t": self.x_t.tolist(),
            "y_t": float(self.y_t),
            "cfg": None if self.cfg is None else self.cfg.to_dict(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        cfg = None if rec.get("cfg") is None else TaskConfig(**rec["cfg"])
        return cls(
            np.asarray(rec["X"], dtype=np.float64).reshape(len(rec["y"]), -1),
            np.asarray(rec["y"], dtype=np.float64),
            np.asarray(rec["w"], dtype=np.float64),
            float(rec["b"]),
            np.asarray(rec["x_t"], dtype=np.float64),
            float(rec["y_t"]),
            cfg,
        )


def _weights(cfg: TaskConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    w = rng.standard_normal((count, cfg.d))
    if cfg.kind is TaskKind.SPARSE:
        keep = np.zeros((count, cfg.d), dtype=bool)
        for row in keep:
            row[rng.choice(cfg.d, SPARSE_NONZERO, replace=False)] = True
        w = np.where(keep, w, 0.0)
    return w


def _inputs(cfg: TaskConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    """Inputs of shape (count, n + 1, d); the last row is the query."""
    shape = (count, cfg.n + 1)
    if cfg.ood is OOD.SCALE:
        return SCALE_STD * rng.standard_normal(shape + (cfg.d,))
    if cfg.ood is OOD.SUBSPACE:
        k = max(cfg.d // 2, 1)
        basis = np.linalg.qr(rng.standard_normal((count, cfg.d, k)))[0]
        z = rng.standard_normal(shape + (k,))
        return np.einsum("cdk,cnk->cnd", basis, z)
    return rng.standard_normal(shape + (cfg.d,))


def sample_arrays(cfg: TaskConfig, count: int, rng: np.random.Generator):
    """Vectorised draw of ``count`` episodes: (X, y, w, b, x_t, y_t) arrays."""
    w = _weights(cfg, rng, count)
    xs = _inputs(cfg, rng, count)
    b = rng.standard_normal(count) if cfg.ood is OOD.NOISE else np.zeros(count)
    ys = np.einsum("cnd,cd->cn", xs, w) + b[:, None]
    return xs[:, :-1], ys[:, :-1], w, b, xs[:, -1], ys[:, -1]


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, episode])


def sample_task(cfg: TaskConfig, episode: int = 0) -> TaskInstance:
    X, y, w, b, x_t, y_t = sample_arrays(cfg, 1, episode_rng(cfg.seed, episode))
    return TaskInstance(X[0], y[0], w[0], float(b[0]), x_t[0], float(y_t[0]), cfg)


def dump_episodes(instances, path) -> None:
    """One JSON record per line."""
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record()) + "\n")


def load_episodes(path) -> list[TaskInstance]:
    with open(path) as fh:
        return [TaskInstance.from_record(json.loads(line)) for line in fh if line.strip()]


# reference solvers


def pinv(A: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0:
        return np.zeros(A.shape[::-1])
    cutoff = rcond * s.max()
    inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (Vt.T * inv) @ U.T


def least_squares_weights(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution."""
    X = np.atleast_2d(X)
    if X.shape[0] == 0:
        return np.zeros(X.shape[1])
    return pinv(X) @ y


def oracle_least_squares(X: np.ndarray, y: np.ndarray, x_t: np.ndarray) -> float:
    return float(least_squares_weights(X, y) @ x_t)


def oracle_gd(X, y, eta: float, steps: int, w0) -> np.ndarray:
    """Trajectory (steps + 1, d) of w <- w - eta X^T (X w - y)."""
    X = np.asarray(X, dtype=np.float64)
    traj = [np.asarray(w0, dtype=np.float64)]
    for _ in range(steps):
        w = traj[-1]
        traj.append(w - eta * X.T @ (X @ w - y))
    return np.array(traj)


def loo_correction(X, y, w) -> np.ndarray:
    """X^T (X X^T - diag(X X^T)) (X w - y)."""
    G = X @ X.T
    np.fill_diagonal(G, 0.0)
    return X.T @ (G @ (X @ w - y))


def oracle_invicl_recurrence(X, y, eta: float, steps: int, w0, correction: bool = True) -> np.ndarray:
    """Trajectory of the leave-one-out update: a GD step plus eta^2 times the cross-example term.

    With ``correction=False`` the second-order term is dropped and each step
    evaluates exactly the same expression as :func:`oracle_gd`.
    """
    X = np.asarray(X, dtype=np.float64)
    traj = [np.asarray(w0, dtype=np.float64)]
    for _ in range(steps):
        w = traj[-1]
        nxt = w - eta * X.T @ (X @ w - y)
        if correction:
            nxt = nxt + eta**2 * loo_correction(X, y, w)
        traj.append(nxt)
    return np.array(traj)


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def lasso_ista_weights(X, y, lam: float, iters: int, w0=None) -> np.ndarray:
    """ISTA on 0.5 ||Xw - y||^2 + lam ||w||_1 with step 1 / lambda_max(X^T X)."""
    if lam < 0 or iters < 1:
        raise ValueError("need lam >= 0 and iters >= 1")
    X = np.asarray(X, dtype=np.float64)
    w = np.zeros(X.shape[1]) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    L = np.linalg.eigvalsh(X.T @ X).max() if X.size else 0.0
    if L <= 0:
        return w
    step = 1.0 / L
    for _ in range(iters):
        w = soft_threshold(w - step * X.T @ (X @ w - y), step * lam)
    return w


def oracle_lasso_ista(X, y, lam: float, iters: int, x_t) -> float:
    return float(lasso_ista_weights(X, y, lam, iters) @ x_t)


def lasso_lambda_grid(n: int) -> list[float]:
    return [f * n for f in (0.001, 0.01, 0.1, 1.0)]


def tune_lasso(X, y, X_val, y_val, iters: int = 2000, grid=None) -> tuple[float, np.ndarray]:
    """Pick lambda from the grid by held-out squared error."""
    grid = lasso_lambda_grid(len(y)) if grid is None else grid
    best = None
    for lam in grid:
        w = lasso_ista_weights(X, y, lam, iters)
        err = float(np.mean((X_val @ w - y_val) ** 2))
        if best is None or err < best[0]:
            best = (err, lam, w)
    return best[1], best[2]
