import numpy as np
import pytest

from wesq.bnfold import bn_fold, fold_model
from wesq.floatops import conv, forward
from wesq.model import BNParams, LayerSpec, ModelGraph


def bn(n, gamma=1.0, beta=0.0, mean=0.0, var=1.0, eps=0.0):
    full = lambda v: np.full(n, v, dtype=np.float64)  # noqa: E731
    return BNParams(full(gamma), full(beta), full(mean), full(var), eps)


def test_identity_bn():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 3, 2, 4)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    wf, bf = bn_fold(w, b, bn(4))
    assert np.array_equal(wf, w) and np.array_equal(bf, b)


def test_scale_by_four():
    w = np.ones((1, 1, 1, 2), dtype=np.float32)
    wf, bf = bn_fold(w, np.array([1.0, -2.0]), bn(2, gamma=2.0, var=0.25))
    assert wf.ravel().tolist() == [4.0, 4.0]
    assert bf.tolist() == [4.0, -8.0]


def test_eps_inside_sqrt():
    wf, _ = bn_fold(np.ones((1, 1, 1, 1)), [0.0], bn(1, var=0.0, eps=0.25))
    assert wf.item() == 2.0


def test_nonpositive_denominator():
    with pytest.raises(ValueError):
        bn_fold(np.ones((1, 1, 1, 1)), [0.0], bn(1, var=0.0, eps=0.0))


def conv_then_bn(x, w, b, p: BNParams, kind):
    y = conv(x, w, kind, 1, (1, 1, 1, 1)) + b
    return p.gamma * (y - p.mean) / np.sqrt(p.var + p.eps) + p.beta


@pytest.mark.parametrize("kind, cin", [("conv2d", 3), ("depthwise_conv2d", 1)])
def test_folded_conv_matches_conv_then_bn(kind, cin):
    rng = np.random.default_rng(1)
    n = 6
    w = rng.normal(size=(3, 3, cin, n)).astype(np.float32)
    b = rng.normal(size=n).astype(np.float32)
    p = BNParams(rng.uniform(0.5, 2, n), rng.normal(size=n), rng.normal(size=n), rng.uniform(0.1, 3, n), 1e-3)
    x = rng.normal(size=(2, 7, 7, 3 if kind == "conv2d" else n))
    ref = conv_then_bn(x, w.astype(np.float64), b, p, kind)
    wf, bf = bn_fold(w, b, p)
    got = conv(x, wf.astype(np.float64), kind, 1, (1, 1, 1, 1)) + bf
    assert np.max(np.abs(got - ref) / (np.abs(ref) + 1)) < 1e-5


def test_fold_model_drops_bn_and_preserves_forward():
    rng = np.random.default_rng(2)
    n = 4
    p = BNParams(rng.uniform(0.5, 2, n), rng.normal(size=n), rng.normal(size=n), rng.uniform(0.1, 3, n))
    m = ModelGraph((5, 5, 2), [LayerSpec("conv2d", rng.normal(size=(3, 3, 2, n)), bn=p)])
    folded = fold_model(m)
    assert folded.layers[0].bn is None
    x = rng.normal(size=(1, 5, 5, 2))
    y = conv(x, m.layers[0].weights.astype(np.float64), "conv2d", 1, (0, 0, 0, 0))
    ref = p.gamma * (y - p.mean) / np.sqrt(p.var + p.eps) + p.beta
    assert np.allclose(forward(folded, x), ref, rtol=1e-5, atol=1e-5)
