import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cada import tensor_ad as ad

from .oracles import softmax_ref

f64 = dict(dtype=torch.float64)


def fd_check(fn, params, eps=1e-5):
    loss = fn()
    for p in params:
        p.grad = None
    grads = ad.backward(loss, {str(i): p for i, p in enumerate(params)})
    fd = ad.finite_difference_grads(fn, params, eps)
    return ad.max_relative_error(list(grads.values()), fd)


def test_softmax_values():
    assert ad.softmax(torch.tensor([0.0, 0.0])).tolist() == [0.5, 0.5]
    assert ad.softmax(torch.tensor([-math.inf, 3.0])).tolist() == [0.0, 1.0]
    out = ad.softmax(torch.tensor([2.0, 1.0, 0.5], **f64))
    assert out.tolist() == pytest.approx([0.6285, 0.2312, 0.1402], abs=1e-4)
    assert out.tolist() == pytest.approx(softmax_ref([2.0, 1.0, 0.5]), abs=1e-15)


def test_softmax_empty_support_raises():
    with pytest.raises(ad.EmptySupportError):
        ad.softmax(torch.full((2, 3), -math.inf))


@settings(max_examples=80, deadline=None)
@given(
    rows=st.lists(
        st.lists(st.one_of(st.floats(-30, 30), st.just(-math.inf)), min_size=1, max_size=9),
        min_size=1,
        max_size=4,
    ).filter(lambda rs: all(any(math.isfinite(x) for x in r) for r in rs))
)
def test_softmax_simplex(rows):
    for row in rows:
        out = ad.softmax(torch.tensor(row, **f64))
        assert float(out.sum()) == pytest.approx(1.0, abs=1e-12)
        assert [o == 0 for o in out.tolist()] == [x == -math.inf for x in row]
        assert torch.all(out >= 0)


def test_rmsnorm():
    x = torch.ones(3, 5, **f64)
    assert torch.allclose(ad.rmsnorm(x, torch.ones(5, **f64)), x, atol=1e-6)
    y = torch.randn(4, 6, **f64)
    g = torch.rand(6, **f64)
    assert torch.allclose(ad.rmsnorm(3.7 * y, g), ad.rmsnorm(y, g), atol=1e-6)


def test_rmsnorm_gradient():
    torch.manual_seed(0)
    x = torch.randn(3, 6, **f64, requires_grad=True)
    g = torch.rand(6, **f64, requires_grad=True)
    w = torch.randn(3, 6, **f64)
    assert fd_check(lambda: (ad.rmsnorm(x, g) * w).sum(), [x, g]) <= 1e-4


def swiglu_params(d=4, h=6):
    torch.manual_seed(1)
    return [torch.randn(*s, **f64, requires_grad=True) for s in [(d, h), (h,), (d, h), (h,), (h, d)]]


def test_swiglu_zero_and_shape():
    w1, b1, w2, b2, w3 = swiglu_params()
    with torch.no_grad():
        out = ad.swiglu(torch.zeros(5, 4, **f64), w1, torch.zeros(6, **f64), w2, torch.zeros(6, **f64), w3)
    assert torch.all(out == 0)
    assert ad.swiglu(torch.randn(5, 4, **f64), w1, b1, w2, b2, w3).shape == (5, 4)
    with pytest.raises(ValueError):
        ad.swiglu(torch.randn(5, 3, **f64), w1, b1, w2, b2, w3)


def test_swiglu_gradient():
    ps = swiglu_params()
    x = torch.randn(5, 4, **f64, requires_grad=True)
    w = torch.randn(5, 4, **f64)
    assert fd_check(lambda: (ad.swiglu(x, *ps) * w).sum(), [x, *ps]) <= 1e-4


def test_topk_selection():
    row = torch.tensor([2.0, 1.0, 0.5])
    assert ad.topk_mask(row, 2).tolist() == [2.0, 1.0, -math.inf]
    assert ad.topk_mask(row, 3).tolist() == row.tolist()
    assert ad.topk_mask(row, 7).tolist() == row.tolist()
    out = ad.softmax(ad.topk_mask(row.double(), 2))
    assert out.tolist() == pytest.approx([0.7311, 0.2689, 0.0], abs=1e-4)
    assert out[2].item() == 0.0


def test_topk_ties_prefer_lower_index():
    assert ad.topk_keep(torch.tensor([1.0, 3.0, 1.0, 1.0]), 2).tolist() == [True, True, False, False]


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 12), k=st.integers(1, 15), seed=st.integers(0, 1000))
def test_topk_keeps_min_k_n(n, k, seed):
    x = torch.randn(3, n, generator=torch.Generator().manual_seed(seed))
    assert torch.all(torch.isfinite(ad.topk_mask(x, k)).sum(-1) == min(k, n))
    w = ad.attention_weights(x, "topk", k)
    assert torch.all((w > 0).sum(-1) == min(k, n))


def test_literal_topk_leaks_weight():
    row = torch.tensor([2.0, 1.0, 0.5], **f64)
    w = ad.attention_weights(row, "topk_literal", 2)
    assert w[2] > 0
    assert float(w.sum()) == pytest.approx(1.0)


@pytest.mark.parametrize("kind", ["sparsemax", "entmax15"])
def test_sparse_normalisers(kind):
    z = torch.tensor([[3.0, 1.0, 0.2, -2.0], [0.0, 0.0, 0.0, 0.0]], **f64)
    out = ad.attention_weights(z, kind)
    assert torch.allclose(out.sum(-1), torch.ones(2, **f64))
    assert out[0, -1] == 0
    assert torch.allclose(out[1], torch.full((4,), 0.25, **f64))


def test_sparsemax_known_value():
    # projection of (0.5, 0.2, -1) onto the simplex: tau = -0.15
    out = ad.sparsemax(torch.tensor([0.5, 0.2, -1.0], **f64))
    assert out.tolist() == pytest.approx([0.65, 0.35, 0.0], abs=1e-12)


@pytest.mark.parametrize("fn", [ad.sparsemax, ad.entmax15])
def test_sparse_normaliser_gradient(fn):
    torch.manual_seed(3)
    z = torch.randn(4, 6, **f64, requires_grad=True)
    w = torch.randn(4, 6, **f64)
    assert fd_check(lambda: (fn(z) * w).sum(), [z]) <= 1e-4


def test_linear_gradient_is_outer_product():
    W = torch.randn(3, 2, **f64, requires_grad=True)
    x = torch.randn(3, **f64)
    grads = ad.backward((x @ W).sum(), {"W": W})
    assert torch.allclose(grads["W"], x[:, None].expand(3, 2))


def test_backward_usage_errors():
    W = torch.randn(3, requires_grad=True)
    with pytest.raises(ad.UsageError):
        ad.backward(W * 2, {"W": W})
    with pytest.raises(ad.UsageError):
        ad.backward(torch.tensor(1.0), {"W": W})
    loss = (W * W).sum()
    ad.backward(loss, {"W": W})
    with pytest.raises(ad.UsageError):
        ad.backward((W * 3).sum(), {"W": W})  # stale grads
    W.grad = None
    with pytest.raises(ad.UsageError):
        ad.backward(loss, {"W": W})  # already consumed


def test_independent_tapes():
    a = torch.randn(4, **f64, requires_grad=True)
    b = torch.randn(4, **f64, requires_grad=True)
    la, lb = (a * a).sum(), (3 * b).sum()
    ga = ad.backward(la, {"a": a})["a"]
    gb = ad.backward(lb, {"b": b})["b"]
    assert torch.allclose(ga, 2 * a) and torch.allclose(gb, torch.full((4,), 3.0, **f64))


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.w": torch.randn(3, 4), "b": torch.arange(5.0), "s": torch.tensor([2.5])}
    ad.save_tensors(tmp_path / "t.bin", tensors)
    back = ad.load_tensors(tmp_path / "t.bin")
    assert list(back) == list(tensors)
    assert all(torch.equal(back[k], tensors[k]) for k in tensors)
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:8] == b"CADATNSR"
    assert struct.unpack_from("<II", raw, 8) == (1, 3)
    with pytest.raises(ValueError):
        ad.loads_tensors(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ValueError):
        ad.loads_tensors(raw + b"\0")


def test_deterministic_outputs():
    z = torch.randn(5, 7, generator=torch.Generator().manual_seed(0))
    for kind in ("softmax", "topk", "sparsemax", "entmax15"):
        assert torch.equal(ad.attention_weights(z, kind, 3), ad.attention_weights(z, kind, 3))
