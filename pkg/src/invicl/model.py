"""GPT-style decoder whose attention mask and position ids follow the ICL scheme."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .layout import SequenceLayout, assign_positions, build_layout, position_capacity
from .masks import build_example_mask, expand_to_tokens
from .schemes import PEScheme, Scheme
from .tasks import TaskInstance


class ContextOverflowError(ValueError):
    pass


class CapacityError(ContextOverflowError):
    """Absolute position table too small for the requested context length."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 3
    heads: int = 4
    embed_dim: int = 64
    d: int = 5
    max_examples: int = 10
    scheme: Scheme = Scheme.INVICL
    pe: PEScheme = PEScheme.SYMMETRIC
    init_std: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "pe", PEScheme(self.pe))
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if min(self.layers, self.heads, self.d, self.max_examples) < 1:
            raise ValueError("layers, heads, d and max_examples must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scheme"] = self.scheme.value
        out["pe"] = self.pe.value
        return out


PAPER_SCALE = dict(layers=12, heads=8, embed_dim=256, d=20, max_examples=40)
TEST_SCALE = dict(layers=3, heads=4, embed_dim=64, d=5, max_examples=10)


@dataclass
class ForwardOutput:
    predictions: np.ndarray
    hidden: list[np.ndarray] | None = None
    layout: SequenceLayout | None = field(default=None, repr=False)


@lru_cache(maxsize=256)
def scheme_layout(scheme: Scheme, n: int):
    layout = build_layout(scheme, n)
    tmask = expand_to_tokens(build_example_mask(scheme, n), layout)
    return layout, tmask


def prediction_positions(scheme: Scheme, layout: SequenceLayout) -> list[tuple[int, int | None]]:
    """(token index, context example index) pairs used as training targets.

    ``None`` marks the query, whose target is ``y_t``. Only positions whose
    prediction cannot see its own label are listed.
    """
    scheme = Scheme(scheme)
    out: list[tuple[int, int | None]] = []
    if scheme in (Scheme.AR, Scheme.INVICL):
        out = [(layout.x_token(layout.readout_slot(i)), i) for i in range(layout.n)]
    out.append((layout.query_token, None))
    return out


def embed_sequence(instance: TaskInstance, layout: SequenceLayout) -> np.ndarray:
    """Token matrix (L, d + 1): x-tokens (x, 0), y-tokens (0, y), query (x_t, 0)."""
    X = np.asarray(instance.X, dtype=np.float64).reshape(-1, np.size(instance.x_t))
    if X.shape[0] != layout.n:
        raise ValueError(f"instance has {X.shape[0]} examples, layout expects {layout.n}")
    return embed_batch(X[None], np.asarray(instance.y)[None], np.asarray(instance.x_t)[None], layout)[0]


def embed_batch(X: np.ndarray, y: np.ndarray, x_t: np.ndarray, layout: SequenceLayout) -> np.ndarray:
    B, n, d = X.shape
    tokens = np.zeros((B, layout.total_tokens, d + 1))
    for slot in range(layout.n_slots - 1):
        i = layout.example_of_slot(slot)
        tx, ty = layout.slots[slot]
        tokens[:, tx, :d] = X[:, i]
        tokens[:, ty, d] = y[:, i]
    tokens[:, layout.query_token, :d] = x_t
    return tokens


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        E = cfg.embed_dim
        self.heads = cfg.heads
        self.ln1_g = nn.Parameter(torch.ones(E))
        self.ln1_b = nn.Parameter(torch.zeros(E))
        self.W_q = nn.Linear(E, E)
        self.W_k = nn.Linear(E, E)
        self.W_v = nn.Linear(E, E)
        self.proj = nn.Linear(E, E)
        self.ln2_g = nn.Parameter(torch.ones(E))
        self.ln2_b = nn.Parameter(torch.zeros(E))
        self.fc1 = nn.Linear(E, 4 * E)
        self.fc2 = nn.Linear(4 * E, E)

    def attention(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, L, E = h.shape
        H = self.heads

        def split(t):
            return t.view(B, L, H, E // H).transpose(1, 2)

        q, k, v = split(self.W_q(h)), split(self.W_k(h)), split(self.W_v(h))
        scores = nx.matmul(q, k.transpose(-2, -1)) / math.sqrt(E // H)
        att = nx.masked_softmax(scores, mask)
        out = nx.matmul(att, v).transpose(1, 2).reshape(B, L, E)
        return self.proj(out)

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = h + self.attention(nx.layer_norm(h, self.ln1_g, self.ln1_b), mask)
        return h + self.fc2(nx.gelu(self.fc1(nx.layer_norm(h, self.ln2_g, self.ln2_b))))


class ICLTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        E = cfg.embed_dim
        self.read_in = nn.Linear(cfg.d + 1, E)
        cap = position_capacity(cfg.pe, cfg.scheme, cfg.max_examples)
        self.pos = nn.Parameter(torch.zeros(cap, E)) if cap else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.lnf_g = nn.Parameter(torch.ones(E))
        self.lnf_b = nn.Parameter(torch.zeros(E))
        self.read_out = nn.Linear(E, 1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("_g"):
                    p.fill_(1.0)
                elif name.endswith("_b") or name.endswith(".bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * self.cfg.init_std)

    @property
    def dtype(self) -> torch.dtype:
        return self.read_in.weight.dtype

    def forward(self, tokens: torch.Tensor, n: int, capture_hidden: bool = False):
        """Per-token predictions (B, L) and, optionally, hidden states per layer.

        ``hidden[0]`` is the embedded input, ``hidden[k]`` the residual stream
        after block ``k``.
        """
        cfg = self.cfg
        layout, tmask = scheme_layout(cfg.scheme, n)
        if tokens.shape[-2] != layout.total_tokens:
            raise ValueError(f"expected {layout.total_tokens} tokens, got {tokens.shape[-2]}")
        h = self.read_in(tokens)
        if self.pos is not None:
            pos = assign_positions(cfg.pe, layout)
            if pos.max() >= self.pos.shape[0]:
                raise CapacityError(
                    f"{n} examples need {pos.max() + 1} positions, table holds {self.pos.shape[0]}"
                )
            h = h + self.pos[torch.as_tensor(pos)]
        mask = torch.as_tensor(tmask)
        hidden = [h] if capture_hidden else None
        for block in self.blocks:
            h = block(h, mask)
            if capture_hidden:
                hidden.append(h)
        preds = self.read_out(nx.layer_norm(h, self.lnf_g, self.lnf_b)).squeeze(-1)
        return preds, hidden

    def predict_batch(self, X, y, x_t, capture_hidden: bool = False):
        n = X.shape[1]
        layout, _ = scheme_layout(self.cfg.scheme, n)
        tokens = torch.as_tensor(embed_batch(X, y, x_t, layout), dtype=self.dtype)
        return self(tokens, n, capture_hidden)


def forward(model: ICLTransformer, instance: TaskInstance, capture_hidden: bool = False) -> ForwardOutput:
    """Single-episode forward pass; outputs are float64 numpy arrays."""
    if instance.d != model.cfg.d:
        raise ValueError(f"instance dimension {instance.d} != model d {model.cfg.d}")
    if model.cfg.pe is PEScheme.ABSOLUTE and instance.n > model.cfg.max_examples:
        raise CapacityError(f"{instance.n} examples exceed max_examples={model.cfg.max_examples}")
    layout, _ = scheme_layout(model.cfg.scheme, instance.n)
    with torch.no_grad():
        preds, hidden = model.predict_batch(
            instance.X[None], instance.y[None], instance.x_t[None], capture_hidden
        )
    return ForwardOutput(
        preds[0].double().numpy(),
        None if hidden is None else [h[0].double().numpy() for h in hidden],
        layout,
    )


def query_prediction(model: ICLTransformer, instance: TaskInstance) -> float:
    out = forward(model, instance)
    return float(out.predictions[out.layout.query_token])


def example_predictions(model: ICLTransformer, instance: TaskInstance) -> np.ndarray:
    """Prediction for each context example, read at its (second-copy) x-token."""
    out = forward(model, instance)
    lay = out.layout
    return np.array([out.predictions[lay.x_token(lay.readout_slot(i))] for i in range(lay.n)])


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> ICLTransformer:
    return ICLTransformer(cfg, seed).to(dtype)
