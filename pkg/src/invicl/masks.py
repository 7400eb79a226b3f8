"""Example- and token-level attention masks, plus brute-force symmetry checks.

Masks are boolean numpy arrays with ``True`` meaning ALLOW (additive mask
value 0) and ``False`` meaning BLOCK (additive value -inf). Row ``i`` lists
what slot ``i`` may attend to.
"""

from __future__ import annotations

import itertools
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Sequence

import numpy as np

from .layout import SequenceLayout
from .schemes import Scheme

EXHAUSTIVE_LIMIT = 8
SAMPLED_PERMUTATIONS = 1000


class EmptyContextError(ValueError):
    pass


class LayoutMismatchError(ValueError):
    pass


def build_example_mask(scheme: Scheme, n: int) -> np.ndarray:
    """Slot-level mask for ``n`` context examples plus the query slot."""
    if n < 1:
        raise EmptyContextError("need at least one context example")
    scheme = Scheme(scheme)
    if scheme is Scheme.AR:
        return np.tril(np.ones((n + 1, n + 1), dtype=bool))
    if scheme is Scheme.INVICL:
        m = np.zeros((2 * n + 1, 2 * n + 1), dtype=bool)
        first = np.arange(n)
        second = n + first
        m[first, first] = True
        # leave-one-out: second copy j reads every first copy except its twin
        m[np.ix_(second, first)] = ~np.eye(n, dtype=bool)
        m[second, second] = True
        m[2 * n, second] = True
        m[2 * n, 2 * n] = True
        return m
    m = np.zeros((n + 1, n + 1), dtype=bool)
    m[:n, :n] = True if scheme is Scheme.PREFIX else np.eye(n, dtype=bool)
    m[n, :] = True
    return m


def expand_to_tokens(emask: np.ndarray, layout: SequenceLayout) -> np.ndarray:
    """Token-level mask: allowed slots are visible in full, own pair is causal."""
    emask = np.asarray(emask, dtype=bool)
    if emask.shape != (layout.n_slots, layout.n_slots):
        raise LayoutMismatchError(
            f"mask has {emask.shape[0]} slots, layout has {layout.n_slots}"
        )
    owner = layout.token_slot()
    tmask = emask[owner[:, None], owner[None, :]].copy()
    same = owner[:, None] == owner[None, :]
    idx = np.arange(layout.total_tokens)
    tmask[same] = (idx[None, :] <= idx[:, None])[same]
    return tmask


def _as_units(context_slots: Sequence[int] | Sequence[Sequence[int]]) -> list[tuple[int, ...]]:
    units = [tuple(u) if isinstance(u, (tuple, list)) else (int(u),) for u in context_slots]
    if len({len(u) for u in units}) > 1:
        raise ValueError("tied units must all have the same size")
    return units


def _unit_permutations(k: int, rng: np.random.Generator) -> Iterable[tuple[int, ...]]:
    if k <= EXHAUSTIVE_LIMIT:
        yield from itertools.permutations(range(k))
        return
    for a, b in itertools.combinations(range(k), 2):
        p = list(range(k))
        p[a], p[b] = b, a
        yield tuple(p)
    for _ in range(SAMPLED_PERMUTATIONS):
        yield tuple(rng.permutation(k))


def is_permutation_symmetric(
    emask: np.ndarray,
    context_slots: Sequence[int] | Sequence[Sequence[int]] | None = None,
    seed: int = 0,
) -> bool:
    """True iff permuting ``context_slots`` (conjugation) leaves ``emask`` unchanged.

    Entries of ``context_slots`` may be tuples: the slots in a tuple move
    together as one unit, position by position. Slots outside every unit stay
    fixed. Exhaustive up to 8 units; beyond that all transpositions plus
    sampled permutations are checked.
    """
    emask = np.asarray(emask, dtype=bool)
    if context_slots is None:
        context_slots = range(emask.shape[0])
    units = _as_units(list(context_slots))
    rng = np.random.default_rng(seed)
    base = np.arange(emask.shape[0])
    for perm in _unit_permutations(len(units), rng):
        p = base.copy()
        for src, dst in enumerate(perm):
            for a, b in zip(units[src], units[dst]):
                p[b] = a
        if not np.array_equal(emask[np.ix_(p, p)], emask):
            return False
    return True


def _all_masks(n: int) -> np.ndarray:
    codes = np.arange(2 ** (n * n), dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n * n)) & 1
    return bits.astype(bool).reshape(-1, n, n)


def _check_range(n: int) -> None:
    if not 2 <= n <= 4:
        raise ValueError(f"enumeration supports 2 <= n <= 4, got {n}")


def scan_invariant_masks(n: int) -> tuple[int, list[np.ndarray]]:
    """Scan every n-by-n binary mask; return (count scanned, symmetric survivors).

    A mask with a fully blocked row cannot be used in softmax attention, so the
    all-BLOCK pattern is dropped even though it is trivially symmetric.
    """
    _check_range(n)
    masks = _all_masks(n)
    keep = masks.any(axis=2).all(axis=1)
    for perm in itertools.permutations(range(n)):
        p = np.array(perm)
        keep &= (masks[:, p][:, :, p] == masks).all(axis=(1, 2))
    return len(masks), [m for m in masks[keep]]


def enumerate_invariant_masks(n: int) -> list[np.ndarray]:
    return scan_invariant_masks(n)[1]


def is_non_leaking(emask: np.ndarray) -> bool:
    """True iff the ALLOW graph without self-loops is acyclic."""
    emask = np.asarray(emask, dtype=bool)
    if emask.ndim != 2 or emask.shape[0] != emask.shape[1]:
        raise ValueError("mask must be square")
    graph = {i: [j for j in np.flatnonzero(emask[i]) if j != i] for i in range(emask.shape[0])}
    try:
        tuple(TopologicalSorter(graph).static_order())
    except CycleError:
        return False
    return True


def invariant_and_non_leaking(n: int) -> list[np.ndarray]:
    return [m for m in enumerate_invariant_masks(n) if is_non_leaking(m)]


def named_invariant_masks(n: int) -> dict[str, np.ndarray]:
    """The three reference patterns: diagonal, off-diagonal and full."""
    eye = np.eye(n, dtype=bool)
    return {"diagonal": eye, "off-diagonal": ~eye, "full": np.ones((n, n), dtype=bool)}


def mask_name(emask: np.ndarray) -> str | None:
    for name, ref in named_invariant_masks(emask.shape[0]).items():
        if np.array_equal(ref, emask):
            return name
    return None


def to_grid(emask: np.ndarray) -> str:
    """Plain-text grid: one row per line, '1' = ALLOW, '0' = BLOCK."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in np.asarray(emask, bool)) + "\n"


def from_grid(text: str) -> np.ndarray:
    rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
    if any(len(r) != len(rows) for r in rows) or any(c not in "01" for r in rows for c in r):
        raise ValueError("grid must be square and contain only 0/1")
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool)
