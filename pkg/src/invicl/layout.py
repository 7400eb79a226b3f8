"""Token order and position indices for the four prompt layouts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schemes import PEScheme, Scheme

# every synthetic example is exactly two tokens: x then y
EXAMPLE_TOKENS = 2


@dataclass(frozen=True)
class SequenceLayout:
    """Slots of token indices.

    Slots ``0..n-1`` hold the context pairs. For a duplicated layout slots
    ``n..2n-1`` are the second copies of the same pairs. The last slot is the
    lone query token.
    """

    slots: tuple[tuple[int, ...], ...]
    duplicated: bool
    n: int

    @property
    def total_tokens(self) -> int:
        return sum(len(s) for s in self.slots)

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def query_slot(self) -> int:
        return len(self.slots) - 1

    @property
    def query_token(self) -> int:
        return self.slots[-1][0]

    def readout_slot(self, i: int) -> int:
        """Slot whose x-token carries the prediction for context example ``i``."""
        return self.n + i if self.duplicated else i

    def x_token(self, slot: int) -> int:
        return self.slots[slot][0]

    def token_slot(self) -> np.ndarray:
        owner = np.empty(self.total_tokens, dtype=np.int64)
        for s, toks in enumerate(self.slots):
            owner[list(toks)] = s
        return owner

    def example_of_slot(self, slot: int) -> int | None:
        """Context example index stored in ``slot``; None for the query."""
        if slot == self.query_slot:
            return None
        return slot % self.n if self.duplicated else slot


def build_layout(scheme: Scheme, n: int) -> SequenceLayout:
    if n < 1:
        raise ValueError("need at least one context example")
    scheme = Scheme(scheme)
    duplicated = scheme is Scheme.INVICL
    copies = 2 if duplicated else 1
    slots = []
    tok = 0
    for _ in range(copies * n):
        slots.append((tok, tok + 1))
        tok += EXAMPLE_TOKENS
    slots.append((tok,))
    return SequenceLayout(tuple(slots), duplicated, n)


def assign_positions(pe: PEScheme, layout: SequenceLayout) -> np.ndarray | None:
    pe = PEScheme(pe)
    if pe is PEScheme.NONE:
        return None
    if pe is PEScheme.ABSOLUTE:
        return np.arange(layout.total_tokens, dtype=np.int64)
    pos = np.empty(layout.total_tokens, dtype=np.int64)
    for toks in layout.slots[:-1]:
        pos[list(toks)] = np.arange(len(toks))
    l_max = max(len(s) for s in layout.slots[:-1])
    pos[layout.query_token] = l_max
    return pos


def position_capacity(pe: PEScheme, scheme: Scheme, max_examples: int) -> int:
    """Rows needed in the learned position table."""
    pe = PEScheme(pe)
    if pe is PEScheme.NONE:
        return 0
    if pe is PEScheme.SYMMETRIC:
        return EXAMPLE_TOKENS + 1
    return build_layout(scheme, max_examples).total_tokens
