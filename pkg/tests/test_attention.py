import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import tiny_setup
from mfskd.arch import ForwardResult, TeacherBundle
from mfskd.attention import (
    AttentionConfig,
    AttentionHead,
    MixupBatch,
    aggregate,
    attention_loss,
    mixup,
    pseudo_label,
    train_attention,
)
from mfskd.checkpoint import state_hash
from mfskd.exceptions import SpecError


def fwd(keys, values):
    return ForwardResult(values, keys, values.mean(0))


def test_zero_query_is_average():
    g = torch.Generator().manual_seed(0)
    keys = torch.randn(3, 4, 5, generator=g)
    values = torch.randn(3, 4, 6, generator=g)
    w, pred = aggregate(AttentionHead(5), fwd(keys, values))
    assert torch.allclose(w, torch.full((4, 3), 1 / 3))
    assert torch.allclose(pred, values.mean(0), atol=1e-6)


def test_identical_keys_give_uniform_weights():
    head = AttentionHead(4)
    with torch.no_grad():
        head.q.copy_(torch.tensor([1.0, -2.0, 3.0, 0.5]))
    k = torch.randn(1, 2, 4).expand(3, 2, 4)
    w, _ = aggregate(head, fwd(k, torch.randn(3, 2, 5)))
    assert torch.allclose(w, torch.full((2, 3), 1 / 3))


def test_two_header_toy():
    # key.q / sqrt(D): scores 1 and 0 -> weights e/(1+e), 1/(1+e)
    head = AttentionHead(1)
    with torch.no_grad():
        head.q.fill_(1.0)
    keys = torch.tensor([[[1.0]], [[0.0]]])
    values = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]])
    w, pred = aggregate(head, fwd(keys, values))
    e = math.e
    assert w[0].tolist() == pytest.approx([e / (1 + e), 1 / (1 + e)])
    assert pred[0].tolist() == pytest.approx([e / (1 + e), 1 / (1 + e)])


def test_dim_mismatch():
    with pytest.raises(SpecError):
        aggregate(AttentionHead(3), fwd(torch.zeros(2, 1, 4), torch.zeros(2, 1, 2)))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 4), b=st.integers(1, 4), d=st.integers(1, 5), c=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_weights_on_simplex_and_match_oracle(n, b, d, c, seed):
    rng = np.random.default_rng(seed)
    keys = torch.from_numpy(rng.normal(size=(n, b, d)) * 3)
    values = torch.from_numpy(rng.normal(size=(n, b, c)))
    head = AttentionHead(d).double()
    with torch.no_grad():
        head.q.copy_(torch.from_numpy(rng.normal(size=d) * 2))
    w, _ = aggregate(head, fwd(keys, values))
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(b, dtype=w.dtype))
    np.testing.assert_allclose(w.detach().numpy(), oracles.attention_weights(head.q.detach().numpy(), keys.numpy()), atol=1e-12)


def test_attention_loss_matches_oracle():
    rng = np.random.default_rng(4)
    keys = torch.from_numpy(rng.normal(size=(3, 6, 4)))
    values = torch.from_numpy(rng.normal(size=(3, 6, 5)))
    head = AttentionHead(4).double()
    with torch.no_grad():
        head.q.copy_(torch.from_numpy(rng.normal(size=4)))
    y = torch.from_numpy(rng.integers(0, 5, 6))
    p = torch.from_numpy(rng.integers(0, 5, 6))
    theta = torch.from_numpy(rng.random(6))
    batch = MixupBatch(torch.zeros(6, 1), y, torch.zeros(6, 1), theta, p)
    got = attention_loss(head, None, batch, forward=fwd(keys, values)).item()
    want = oracles.attention_ce(head.q.detach().numpy(), keys.numpy(), values.numpy(), y.numpy(), p.numpy(), theta.numpy())
    assert got == pytest.approx(want, abs=1e-10)


def test_attention_loss_theta_one_is_plain_ce():
    keys, values = torch.randn(2, 3, 4), torch.randn(2, 3, 5)
    y = torch.tensor([0, 1, 2])
    batch = MixupBatch(torch.zeros(3, 1), y, torch.zeros(3, 1), torch.ones(3), torch.tensor([4, 4, 4]))
    got = attention_loss(AttentionHead(4), None, batch, forward=fwd(keys, values))
    assert torch.allclose(got, torch.nn.functional.cross_entropy(values.mean(0), y))


def test_attention_loss_label_range():
    batch = MixupBatch(torch.zeros(1, 1), torch.tensor([9]), torch.zeros(1, 1), torch.ones(1), torch.tensor([0]))
    with pytest.raises(SpecError):
        attention_loss(AttentionHead(2), None, batch, forward=fwd(torch.zeros(2, 1, 2), torch.zeros(2, 1, 3)))


def test_mixup_endpoints_and_range():
    x, g = torch.ones(2, 3), -torch.ones(2, 3)
    assert torch.equal(mixup(x, g, 1.0), x)
    assert torch.equal(mixup(x, g, 0.0), g)
    assert torch.allclose(mixup(x, g, torch.tensor([0.25, 0.75])), torch.tensor([[-0.5] * 3, [0.5] * 3]))
    with pytest.raises(SpecError):
        mixup(x, g, 1.5)
    with pytest.raises(SpecError):
        mixup(x, torch.zeros(3, 3), 0.5)


def test_pseudo_label_tie_goes_to_lowest_index():
    from test_evaluation import teacher_from_table

    t = [teacher_from_table(torch.tensor([[1.0, 3.0, 3.0]])), teacher_from_table(torch.tensor([[1.0, 3.0, 3.0]]))]
    assert pseudo_label(TeacherBundle(t), torch.zeros(1, 3, 8, 8)).tolist() == [1]


def test_train_attention_freezes_models_and_improves_or_keeps():
    bundle, student, generator = tiny_setup()
    s_hash, g_hash = state_hash(student), state_hash(generator)
    t_hash = [state_hash(t) for t in bundle.teachers]
    x = torch.randn(40, 3, 8, 8)
    y = torch.arange(40) % 5
    head, history = train_attention(AttentionHead(8, 5), student, generator, bundle, x, y, AttentionConfig(epochs=3, batch_size=8))
    assert state_hash(student) == s_hash and state_hash(generator) == g_hash
    assert [state_hash(t) for t in bundle.teachers] == t_hash
    assert student.training and generator.training
    assert all(p.requires_grad for p in student.parameters())
    assert history[0]["epoch"] == 0 and len(history) == 4
    best = max(h["val_acc"] for h in history)
    assert best >= history[0]["val_acc"]


def test_train_attention_empty_subset_points_to_average():
    bundle, student, generator = tiny_setup()
    with pytest.raises(SpecError, match="average"):
        train_attention(AttentionHead(8), student, generator, bundle, torch.zeros(0, 3, 8, 8), torch.zeros(0, dtype=torch.long))
