"""Training loop, evaluation metrics and the property checks behind the comparison table."""

from __future__ import annotations

import copy
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import numerics as nx
from .checkpoint import atomic_write, save_checkpoint
from .model import (
    CapacityError,
    ICLTransformer,
    ModelConfig,
    build_model,
    example_predictions,
    forward,
    prediction_positions,
    query_prediction,
    scheme_layout,
)
from .schemes import PEScheme, Scheme
from .tasks import TaskConfig, TaskInstance, least_squares_weights, sample_arrays, sample_task

log = logging.getLogger(__name__)

INVARIANCE_TOL = 1e-9
LEAK_TOL = 1e-12
INTERDEP_TOL = 1e-8
DEFAULT_TAU = 1e-4
DEFAULT_PROBE_LAMBDA = 1e-3
PROBE_LAMBDA_FLOOR = 1e-8

# (invariance, non-leakage, interdependence) per scheme; AR interdependence is partial
TABLE1 = {
    Scheme.AR: (False, True, True),
    Scheme.PREFIX: (True, False, True),
    Scheme.BOE: (True, True, False),
    Scheme.INVICL: (True, True, True),
}


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig
    task: TaskConfig
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 100
    checkpoint_path: str | None = None
    clip: float = 1.0
    query_only: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.task.n > self.model.max_examples and self.model.pe is PEScheme.ABSOLUTE:
            raise CapacityError("training length exceeds the absolute position table")


@dataclass
class TrainResult:
    model: ICLTransformer
    trace: list[tuple[int, float]]
    seconds: float = 0.0


def batch_loss(model: ICLTransformer, X, y, x_t, y_t, query_only: bool = False) -> torch.Tensor:
    """Mean squared error over the non-leaking prediction positions."""
    n = X.shape[1]
    layout, _ = scheme_layout(model.cfg.scheme, n)
    preds, _ = model.predict_batch(X, y, x_t)
    positions = prediction_positions(model.cfg.scheme, layout)
    if query_only:
        positions = positions[-1:]
    tok = [p for p, _ in positions]
    targets = np.stack([y_t if i is None else y[:, i] for _, i in positions], axis=1)
    diff = preds[:, tok] - torch.as_tensor(targets, dtype=preds.dtype)
    return (diff * diff).mean()


def train(cfg: TrainConfig, callback: Callable[[int, float], None] | None = None) -> TrainResult:
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model, seed=cfg.seed, dtype=getattr(torch, cfg.dtype))
    params = list(model.parameters())
    moments = nx.AdamMoments.zeros_like(params)
    hyper = nx.AdamHyper(lr=cfg.lr)
    trace: list[tuple[int, float]] = []
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        rng = np.random.default_rng([cfg.seed, 1, step])
        X, y, _, _, x_t, y_t = sample_arrays(cfg.task, cfg.batch_size, rng)
        nx.zero_grads(params)
        loss = batch_loss(model, X, y, x_t, y_t, cfg.query_only)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {step}")
        nx.backward(loss)
        grads = nx.grads_or_zeros(params)
        nx.clip_grad_norm(grads, cfg.clip)
        nx.adam_step(params, grads, moments, hyper, step)
        if step % cfg.eval_every == 0 or step == cfg.steps or step == 1:
            trace.append((step, value))
            if callback:
                callback(step, value)
    result = TrainResult(model, trace, time.perf_counter() - t0)
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, model,
                        meta={"steps": cfg.steps, "seed": cfg.seed, "lr": cfg.lr, "task": cfg.task.to_dict()})
    return result


def as_double(model: ICLTransformer) -> ICLTransformer:
    if model.dtype == torch.float64:
        return model
    return copy.deepcopy(model).double()


# evaluation


@dataclass
class EvalRecord:
    scheme: str
    pe: str
    ood: str
    length: int
    episodes: int
    mse: float
    d: int

    @property
    def mse_norm(self) -> float:
        return self.mse / self.d


def _eval_rng(task: TaskConfig, length: int) -> np.random.Generator:
    return np.random.default_rng([task.seed, 2, length])


def _query_sq_errors(model: ICLTransformer, task: TaskConfig, length: int, episodes: int,
                     chunk: int = 256) -> np.ndarray:
    model = as_double(model)
    X, y, _, _, x_t, y_t = sample_arrays(task.with_(n=length), episodes, _eval_rng(task, length))
    layout, _ = scheme_layout(model.cfg.scheme, length)
    errs = []
    with torch.no_grad():
        for s in range(0, episodes, chunk):
            sl = slice(s, s + chunk)
            preds, _ = model.predict_batch(X[sl], y[sl], x_t[sl])
            errs.append((preds[:, layout.query_token].numpy() - y_t[sl]) ** 2)
    return np.concatenate(errs)


def mse_curve(model: ICLTransformer, lengths: Iterable[int], task: TaskConfig, episodes: int) -> list[EvalRecord]:
    cfg = model.cfg
    out = []
    for length in lengths:
        if cfg.pe is PEScheme.ABSOLUTE and length > cfg.max_examples:
            raise CapacityError(f"length {length} exceeds absolute PE capacity ({cfg.max_examples} examples)")
        errs = _query_sq_errors(model, task, length, episodes)
        out.append(EvalRecord(cfg.scheme.value, cfg.pe.value, task.ood.value, length, episodes, float(errs.mean()), task.d))
    return out


def reference_curve(lengths: Iterable[int], task: TaskConfig, episodes: int,
                    solver: str = "least_squares") -> list[EvalRecord]:
    """Same evaluation episodes, answered by a closed-form solver instead of a model."""
    out = []
    for length in lengths:
        X, y, _, _, x_t, y_t = sample_arrays(task.with_(n=length), episodes, _eval_rng(task, length))
        if solver == "least_squares":
            preds = np.array([least_squares_weights(X[e], y[e]) @ x_t[e] for e in range(episodes)])
        elif solver == "zero":
            preds = np.zeros(episodes)
        else:
            raise ValueError(f"unknown solver {solver}")
        out.append(EvalRecord(solver, "-", task.ood.value, length, episodes, float(np.mean((preds - y_t) ** 2)), task.d))
    return out


@dataclass
class SensitivityResult:
    scheme: str
    n: int
    permutations: int
    tau: float
    change_freq: float
    pred_std: float


def sensitivity(model: ICLTransformer, task: TaskConfig, n: int, permutation_count: int,
                tau: float = DEFAULT_TAU, episodes: int = 1) -> SensitivityResult:
    """Fraction of random context orderings that move the query prediction by more than ``tau``."""
    if permutation_count < 1:
        raise ValueError("permutation_count must be >= 1")
    model = as_double(model)
    rng = np.random.default_rng([task.seed, 3, n])
    changed, stds = 0, []
    for e in range(episodes):
        inst = sample_task(task.with_(n=n), episode=e)
        base = query_prediction(model, inst)
        preds = []
        for _ in range(permutation_count):
            p = query_prediction(model, inst.permuted(rng.permutation(n)))
            preds.append(p)
            changed += abs(p - base) > tau
        stds.append(float(np.std(preds)))
    return SensitivityResult(model.cfg.scheme.value, n, permutation_count, tau,
                             changed / (permutation_count * episodes), float(np.mean(stds)))


# definition checks


@dataclass
class DefinitionReport:
    scheme: str
    invariance_dev: float
    leak_effect: float
    effects: np.ndarray = field(repr=False)
    context_encoding_shift: float = 0.0

    @property
    def dependence(self) -> np.ndarray:
        return self.effects > INTERDEP_TOL

    @property
    def invariance(self) -> bool:
        return self.invariance_dev <= INVARIANCE_TOL

    @property
    def non_leakage(self) -> bool:
        return self.leak_effect <= LEAK_TOL

    @property
    def interdependence(self) -> bool:
        """Some example's prediction depends on another example."""
        return bool(self.dependence.any())

    @property
    def interdependence_scope(self) -> str:
        off = ~np.eye(len(self.dependence), dtype=bool)
        if not self.dependence.any():
            return "none"
        return "full" if self.dependence[off].all() else "partial"

    @property
    def min_interdependence_effect(self) -> float:
        off = ~np.eye(len(self.dependence), dtype=bool)
        return float(self.effects[off].min()) if off.any() else 0.0

    def verdicts(self) -> tuple[bool, bool, bool]:
        return self.invariance, self.non_leakage, self.interdependence

    def matches_table(self) -> bool:
        return self.verdicts() == TABLE1[Scheme(self.scheme)]


def _perturbed(inst: TaskInstance, j: int, rng: np.random.Generator, label_only: bool = False) -> TaskInstance:
    X, y = inst.X.copy(), inst.y.copy()
    if not label_only:
        X[j] = rng.standard_normal(inst.d)
    y[j] = y[j] + 1.0 + rng.standard_normal()
    return TaskInstance(X, y, inst.w, inst.b, inst.x_t, inst.y_t, inst.cfg)


def _context_hidden(model: ICLTransformer, inst: TaskInstance, i: int) -> np.ndarray:
    out = forward(model, inst, capture_hidden=True)
    lay = out.layout
    toks = list(lay.slots[lay.readout_slot(i)])
    return np.stack([h[toks] for h in out.hidden])


def definition_checks(model: ICLTransformer, instance: TaskInstance, seed: int = 0,
                      max_exhaustive: int = 6) -> DefinitionReport:
    """Measure invariance, label leakage and cross-example dependence on one episode."""
    model = as_double(model)
    n = instance.n
    rng = np.random.default_rng(seed)
    base_q = query_prediction(model, instance)
    if n <= max_exhaustive:
        perms = itertools.permutations(range(n))
    else:
        perms = (rng.permutation(n) for _ in range(1000))
    inv = max(abs(query_prediction(model, instance.permuted(p)) - base_q) for p in perms)

    base = example_predictions(model, instance)
    leak = max(abs(example_predictions(model, _perturbed(instance, i, rng, label_only=True))[i] - base[i])
               for i in range(n))

    effects = np.zeros((n, n))
    shift = 0.0
    base_hidden = [_context_hidden(model, instance, i) for i in range(n)]
    for j in range(n):
        pert = _perturbed(instance, j, rng)
        preds = example_predictions(model, pert)
        for i in range(n):
            if i == j:
                continue
            effects[i, j] = abs(preds[i] - base[i])
            shift = max(shift, float(np.abs(_context_hidden(model, pert, i) - base_hidden[i]).max()))
    return DefinitionReport(model.cfg.scheme.value, float(inv), float(leak), effects, shift)


# length extrapolation and probing


@dataclass
class ExtrapolationRecord:
    label: str
    train_len: int
    eval_len: int
    mse_train_len: float
    mse_eval_len: float

    @property
    def ratio(self) -> float:
        return self.mse_eval_len / self.mse_train_len if self.mse_train_len > 0 else math.inf


def length_extrapolation(models: dict[str, ICLTransformer], train_len: int, factor: int,
                         task: TaskConfig, episodes: int) -> list[ExtrapolationRecord]:
    out = []
    eval_len = factor * train_len
    for label, model in models.items():
        a, b = mse_curve(model, [train_len, eval_len], task, episodes)
        out.append(ExtrapolationRecord(label, train_len, eval_len, a.mse, b.mse))
    return out


@dataclass
class ProbeRecord:
    scheme: str
    layer: int
    probe_mse: float


def _query_hidden(model, task: TaskConfig, n: int, episodes: int, salt: int):
    model = as_double(model)
    rng = np.random.default_rng([task.seed, 4, salt])
    X, y, _, _, x_t, y_t = sample_arrays(task.with_(n=n), episodes, rng)
    layout, _ = scheme_layout(model.cfg.scheme, n)
    with torch.no_grad():
        preds, hidden = model.predict_batch(X, y, x_t, capture_hidden=True)
    feats = [h[:, layout.query_token].numpy() for h in hidden]
    return feats, preds[:, layout.query_token].numpy(), y_t


def ridge_fit(H: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Ridge weights without intercept; falls back to a floored lambda if singular."""
    A = H.T @ H
    rhs = H.T @ y
    for reg in (lam, max(lam, PROBE_LAMBDA_FLOOR)):
        try:
            return np.linalg.solve(A + reg * np.eye(A.shape[0]), rhs)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("ridge system singular even with floored lambda")


def linear_probe(model: ICLTransformer, layers: Sequence[int], task: TaskConfig, episodes: int,
                 lam: float = DEFAULT_PROBE_LAMBDA, n: int | None = None,
                 test_episodes: int | None = None) -> tuple[list[ProbeRecord], float]:
    """Held-out MSE of a ridge probe from the query hidden state to y_t, per layer.

    Returns the probe records and the model's own MSE on the same held-out
    episodes.
    """
    n = task.n if n is None else n
    bad = [l for l in layers if not 0 <= l <= model.cfg.layers]
    if bad:
        raise ValueError(f"layers {bad} outside 0..{model.cfg.layers}")
    test_episodes = episodes if test_episodes is None else test_episodes
    tr_feats, _, tr_y = _query_hidden(model, task, n, episodes, salt=0)
    te_feats, te_pred, te_y = _query_hidden(model, task, n, test_episodes, salt=1)
    records = []
    for layer in layers:
        w = ridge_fit(tr_feats[layer], tr_y, lam)
        err = float(np.mean((te_feats[layer] @ w - te_y) ** 2))
        records.append(ProbeRecord(model.cfg.scheme.value, layer, err))
    return records, float(np.mean((te_pred - te_y) ** 2))


# CSV output


def fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], force: bool = True) -> None:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    data = ("\n".join(lines) + "\n").encode()
    atomic_write(path, lambda fh: fh.write(data))


MSE_HEADER = ("scheme", "pe", "ood", "length", "episodes", "mse", "mse_norm")
SENS_HEADER = ("scheme", "n", "permutations", "tau", "change_freq", "pred_std")
PROBE_HEADER = ("scheme", "layer", "probe_mse")
EXTRAP_HEADER = ("label", "train_len", "eval_len", "mse_train_len", "mse_eval_len", "ratio")
TRACE_HEADER = ("step", "loss")


def mse_rows(records: Iterable[EvalRecord]):
    return [(r.scheme, r.pe, r.ood, r.length, r.episodes, r.mse, r.mse_norm) for r in records]


def sens_rows(results: Iterable[SensitivityResult]):
    return [(r.scheme, r.n, r.permutations, float(r.tau), r.change_freq, r.pred_std) for r in results]


def probe_rows(records: Iterable[ProbeRecord]):
    return [(r.scheme, r.layer, r.probe_mse) for r in records]


def extrap_rows(records: Iterable[ExtrapolationRecord]):
    return [(r.label, r.train_len, r.eval_len, r.mse_train_len, r.mse_eval_len, r.ratio) for r in records]
