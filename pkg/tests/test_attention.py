import numpy as np
import pytest

from mse2e import numerics as nx
from mse2e.attention import ContentAttention, StreamAttention, attend, han_fuse
from mse2e.numerics import ContractError, Tensor


def test_zero_g_gives_uniform_weights_and_mean_context(rng):
    att = ContentAttention(4, 3, 5, rng)
    att.g.data[...] = 0.0
    H = Tensor(rng.normal(size=(7, 3)))
    r, a = attend(att, Tensor(rng.normal(size=4)), H)
    assert np.allclose(a.data, 1 / 7, atol=1e-15)
    assert np.allclose(r.data, H.data.mean(0), atol=1e-14)


def test_weights_are_a_distribution(rng):
    att = ContentAttention(4, 3, 5, rng)
    att.g.data *= 50
    _, a = attend(att, Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(9, 3))))
    assert np.all(a.data >= 0) and abs(a.data.sum() - 1) < 1e-12


def test_empty_stream_rejected(rng):
    att = ContentAttention(2, 3, 2, rng)
    with pytest.raises(ContractError):
        attend(att, Tensor(np.zeros(2)), Tensor(np.zeros((0, 3))))


def test_attention_gradients(rng):
    att = ContentAttention(3, 2, 4, rng)
    for p in att.parameters():
        p.data *= 10
    q = Tensor(rng.normal(size=3), requires_grad=True)
    H = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=2))
    errs = nx.gradient_check(lambda: nx.sum_(attend(att, q, H)[0] * w),
                             [("q", q), ("H", H), *att.named_parameters()])
    assert max(errs.values()) < 1e-6, errs


def test_han_single_stream_is_identity(rng):
    sa = StreamAttention(3, 2, 4, rng)
    r = Tensor(rng.normal(size=2))
    fused, beta = han_fuse(sa, Tensor(np.zeros(3)), [r])
    assert np.array_equal(fused.data, r.data) and np.array_equal(beta.data, [1.0])


def test_fixed_fusion_is_plain_average(rng):
    sa = StreamAttention(3, 2, 4, rng, fixed=True)
    assert sa.parameters() == []
    a, b = Tensor(rng.normal(size=2)), Tensor(rng.normal(size=2))
    fused, beta = han_fuse(sa, Tensor(rng.normal(size=3)), [a, b])
    assert np.allclose(beta.data, 0.5) and np.allclose(fused.data, (a.data + b.data) / 2)


def test_han_is_convex_combination(rng):
    sa = StreamAttention(3, 2, 4, rng)
    for p in sa.parameters():
        p.data *= 20
    cs = [Tensor(rng.normal(size=2)) for _ in range(3)]
    fused, beta = han_fuse(sa, Tensor(rng.normal(size=3)), cs)
    assert abs(beta.data.sum() - 1) < 1e-12 and np.all(beta.data > 0)
    assert np.allclose(fused.data, sum(b * c.data for b, c in zip(beta.data, cs)))


def test_han_shape_mismatch_and_empty(rng):
    sa = StreamAttention(3, 2, 4, rng)
    with pytest.raises(ContractError):
        han_fuse(sa, Tensor(np.zeros(3)), [])
    with pytest.raises(ContractError):
        han_fuse(sa, Tensor(np.zeros(3)), [Tensor(np.zeros(2)), Tensor(np.zeros(3))])


def test_han_gradients(rng):
    sa = StreamAttention(3, 2, 4, rng)
    for p in sa.parameters():
        p.data *= 10
    q = Tensor(rng.normal(size=3), requires_grad=True)
    cs = [Tensor(rng.normal(size=2), requires_grad=True) for _ in range(2)]
    errs = nx.gradient_check(lambda: nx.sum_(han_fuse(sa, q, cs)[0] * 1.3),
                             [("q", q), ("c0", cs[0]), ("c1", cs[1]), *sa.named_parameters()])
    assert max(errs.values()) < 1e-6, errs
