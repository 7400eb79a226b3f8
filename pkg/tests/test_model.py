import itertools

import numpy as np
import pytest
import torch

from conftest import tiny_model
from invicl.layout import build_layout
from invicl.model import (
    CapacityError,
    ModelConfig,
    embed_sequence,
    example_predictions,
    forward,
    prediction_positions,
    query_prediction,
    scheme_layout,
)
from invicl.schemes import PEScheme, Scheme
from invicl.tasks import TaskConfig, sample_task


def inst(n=4, d=3, seed=0):
    return sample_task(TaskConfig(d=d, n=n, seed=seed))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(heads=3, embed_dim=64)
    assert ModelConfig(scheme="ar", pe="absolute").scheme is Scheme.AR


def test_embedding_layout():
    i = inst(2)
    lay = build_layout(Scheme.INVICL, 2)
    tok = embed_sequence(i, lay)
    assert np.array_equal(tok[0, :3], i.X[0]) and tok[0, 3] == 0
    assert tok[1, 3] == i.y[0] and not tok[1, :3].any()
    assert np.array_equal(tok[4], tok[0]) and np.array_equal(tok[lay.query_token, :3], i.x_t)


def test_init_is_seeded():
    a, b = tiny_model(seed=5), tiny_model(seed=5)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not torch.equal(a.read_in.weight, tiny_model(seed=6).read_in.weight)


@pytest.mark.parametrize("scheme", [Scheme.INVICL, Scheme.PREFIX, Scheme.BOE])
def test_query_invariant_for_symmetric_schemes(scheme):
    model, i = tiny_model(scheme), inst(4)
    base = query_prediction(model, i)
    for p in itertools.permutations(range(4)):
        assert abs(query_prediction(model, i.permuted(p)) - base) <= 1e-9


def test_ar_is_order_sensitive():
    model, i = tiny_model(Scheme.AR, PEScheme.ABSOLUTE), inst(4)
    base = query_prediction(model, i)
    assert max(abs(query_prediction(model, i.permuted(p)) - base) for p in itertools.permutations(range(4))) > 1e-6


@pytest.mark.parametrize("scheme", [Scheme.AR, Scheme.INVICL])
def test_training_targets_never_see_own_label(scheme):
    """Gradient of each target prediction w.r.t. its own label token is exactly zero."""
    pe = PEScheme.ABSOLUTE if scheme is Scheme.AR else PEScheme.SYMMETRIC
    model, i = tiny_model(scheme, pe), inst(4)
    layout, _ = scheme_layout(scheme, 4)
    tokens = torch.as_tensor(embed_sequence(i, layout)[None]).requires_grad_(True)
    preds, _ = model(tokens, 4)
    for tok, ex in prediction_positions(scheme, layout)[:-1]:
        (g,) = torch.autograd.grad(preds[0, tok], tokens, retain_graph=True)
        label_tokens = [s[1] for k, s in enumerate(layout.slots[:-1]) if layout.example_of_slot(k) == ex]
        assert all(g[0, t, -1].item() == 0.0 for t in label_tokens)


def test_prediction_positions():
    lay = build_layout(Scheme.PREFIX, 3)
    assert prediction_positions(Scheme.PREFIX, lay) == [(lay.query_token, None)]
    lay = build_layout(Scheme.INVICL, 2)
    assert prediction_positions(Scheme.INVICL, lay) == [(4, 0), (6, 1), (8, None)]


def test_symmetric_pe_extends_past_training_length():
    model = tiny_model(max_examples=3)
    assert np.isfinite(query_prediction(model, inst(12)))


def test_absolute_pe_capacity_error():
    model = tiny_model(Scheme.AR, PEScheme.ABSOLUTE, max_examples=3)
    with pytest.raises(CapacityError):
        forward(model, inst(5))


def test_forward_hidden_states():
    model = tiny_model(layers=2)
    out = forward(model, inst(3), capture_hidden=True)
    assert len(out.hidden) == 3 and out.hidden[0].shape == (13, 16)
    assert example_predictions(model, inst(3)).shape == (3,)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(tiny_model(d=3), inst(3, d=4))


def test_zero_readout_predicts_zero():
    model = tiny_model()
    with torch.no_grad():
        model.read_out.weight.zero_()
        model.read_out.bias.zero_()
    assert not forward(model, inst(3)).predictions.any()
