import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invicl.layout import build_layout
from invicl.masks import (
    EmptyContextError,
    LayoutMismatchError,
    build_example_mask,
    expand_to_tokens,
    from_grid,
    invariant_and_non_leaking,
    is_non_leaking,
    is_permutation_symmetric,
    mask_name,
    scan_invariant_masks,
    to_grid,
)
from invicl.schemes import Scheme


def has_cycle(m):
    """Independent oracle: colour-marking DFS over edges i -> j (i != j)."""
    n = len(m)
    state = [0] * n

    def visit(u):
        state[u] = 1
        for v in range(n):
            if v != u and m[u][v]:
                if state[v] == 1 or (state[v] == 0 and visit(v)):
                    return True
        state[u] = 2
        return False

    return any(state[u] == 0 and visit(u) for u in range(n))


def symmetric_by_loops(m):
    n = len(m)
    for p in itertools.permutations(range(n)):
        for i in range(n):
            for j in range(n):
                if m[p[i]][p[j]] != m[i][j]:
                    return False
    return True


def test_scan_n3_yields_three_named_masks():
    scanned, survivors = scan_invariant_masks(3)
    assert scanned == 512
    assert sorted(mask_name(m) for m in survivors) == ["diagonal", "full", "off-diagonal"]


@pytest.mark.parametrize("n", [2, 3])
def test_scan_agrees_with_loop_oracle(n):
    oracle = []
    for code in range(2 ** (n * n)):
        m = [[bool((code >> (i * n + j)) & 1) for j in range(n)] for i in range(n)]
        if all(any(r) for r in m) and symmetric_by_loops(m):
            oracle.append(np.array(m))
    _, got = scan_invariant_masks(n)
    key = lambda a: a.tobytes()
    assert sorted(map(key, got)) == sorted(map(key, oracle))


def test_scan_rejects_out_of_range():
    with pytest.raises(ValueError):
        scan_invariant_masks(5)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_intersection_is_diagonal(n):
    both = invariant_and_non_leaking(n)
    assert len(both) == 1 and mask_name(both[0]) == "diagonal"


@given(st.integers(2, 7).flatmap(lambda n: st.lists(st.booleans(), min_size=n * n, max_size=n * n)))
@settings(max_examples=200, deadline=None)
def test_non_leaking_agrees_with_dfs_oracle(bits):
    n = int(round(len(bits) ** 0.5))
    m = np.array(bits).reshape(n, n)
    assert is_non_leaking(m) == (not has_cycle(m.tolist()))


def test_causal_is_non_leaking_and_prefix_is_not():
    assert is_non_leaking(np.tril(np.ones((4, 4), bool)))
    assert not is_non_leaking(np.ones((4, 4), bool))


@pytest.mark.parametrize("scheme", list(Scheme))
def test_scheme_masks_have_no_blocked_rows(scheme):
    m = build_example_mask(scheme, 4)
    assert m.any(axis=1).all()


def test_invicl_mask_rules():
    n = 3
    m = build_example_mask(Scheme.INVICL, n)
    assert m.shape == (7, 7)
    assert np.array_equal(m[:n, :n], np.eye(n, dtype=bool)) and not m[:n, n:].any()
    assert np.array_equal(m[n:2 * n, :n], ~np.eye(n, dtype=bool))
    assert np.array_equal(m[n:2 * n, n:2 * n], np.eye(n, dtype=bool))
    assert not m[2 * n, :n].any() and m[2 * n, n:].all()
    assert is_non_leaking(m)


def test_scheme_symmetry_at_slot_level():
    n = 4
    ctx = list(range(n))
    assert not is_permutation_symmetric(build_example_mask(Scheme.AR, n), ctx)
    assert is_permutation_symmetric(build_example_mask(Scheme.PREFIX, n), ctx)
    assert is_permutation_symmetric(build_example_mask(Scheme.BOE, n), ctx)
    tied = [(i, n + i) for i in range(n)]
    assert is_permutation_symmetric(build_example_mask(Scheme.INVICL, n), tied)


def test_large_symmetry_check_uses_sampling():
    n = 10
    assert is_permutation_symmetric(build_example_mask(Scheme.BOE, n), range(n))
    assert not is_permutation_symmetric(build_example_mask(Scheme.AR, n), range(n))


def test_expand_to_tokens_causal_within_pair():
    lay = build_layout(Scheme.BOE, 2)
    t = expand_to_tokens(build_example_mask(Scheme.BOE, 2), lay)
    assert t[0, 0] and not t[0, 1] and t[1, 0] and t[1, 1]
    assert not t[0, 2].any()
    assert t[lay.query_token].all()


def test_expand_rejects_wrong_size():
    with pytest.raises(LayoutMismatchError):
        expand_to_tokens(np.ones((3, 3), bool), build_layout(Scheme.BOE, 3))


def test_empty_context_rejected():
    with pytest.raises(EmptyContextError):
        build_example_mask(Scheme.PREFIX, 0)


def test_grid_round_trip():
    m = np.random.default_rng(0).random((5, 5)) > 0.5
    assert np.array_equal(from_grid(to_grid(m)), m)
    with pytest.raises(ValueError):
        from_grid("10\n1")
