import numpy as np
import pytest

from copydetect import encoder as enc
from copydetect.encoder import EncoderParams
from gradcheck import numeric_grad, rel_err


def tiny_net(W1, b1, W2, b2):
    a = [np.array(x, dtype=np.float64) for x in (W1, b1, W2, b2)]
    return EncoderParams(*a, class_proxies=np.ones((1, a[2].shape[0])), features="raw")


def test_hand_computed_forward():
    p = tiny_net([[2.0]], [0.0], [[3.0]], [1.0])
    d, _ = enc.forward(p, np.array([[0.5]]))
    assert d.vec.tolist() == [4.0]


def test_zero_net_gives_zero_descriptor():
    p = enc.init_params(0, pixels=64, hidden=5, dim=3, features="raw").zeros_like()
    d, _ = enc.forward(p, np.random.default_rng(0).random((8, 8)))
    assert not d.vec.any()


def test_init_contract():
    a, b = enc.init_params(4, hidden=16, dim=8, classes=5), enc.init_params(4, hidden=16, dim=8, classes=5)
    assert a.equals(b)
    assert not a.b1.any() and not a.b2.any()
    assert np.allclose(np.linalg.norm(a.class_proxies, axis=1), 1.0, atol=1e-6)
    assert a.dims == (enc.input_width(4096, "edges"), 16, 8, 5)
    assert np.abs(a.W1).max() <= 1 / np.sqrt(a.dims[0])
    with pytest.raises(ValueError):
        enc.init_params(0, hidden=0)


def test_forward_is_deterministic_and_unnormalized():
    p = enc.init_params(1, hidden=16, dim=8)
    img = np.random.default_rng(1).random((64, 64))
    y1, y2 = enc.forward(p, img)[0].vec, enc.forward(p, img)[0].vec
    assert np.array_equal(y1, y2)
    p2 = p.copy()
    p2.W2 *= 3.0
    p2.b2 *= 3.0
    assert np.linalg.norm(enc.forward(p2, img)[0].vec) == pytest.approx(3 * np.linalg.norm(y1))


def test_batch_matches_single():
    p = enc.init_params(2, hidden=16, dim=8)
    imgs = list(np.random.default_rng(2).random((3, 64, 64)))
    Y, _ = enc.forward_batch(p, imgs)
    for k, img in enumerate(imgs):
        assert np.allclose(Y[k], enc.forward(p, img)[0].vec, atol=1e-12)


def test_pooled_features():
    img = np.random.default_rng(3).random((64, 64))
    X = enc.image_features([img])
    assert X.shape == (1, enc.input_width(4096, "edges"))
    # first half: 4x4 block means of the centered image
    assert X[0, 0] == pytest.approx(img[:4, :4].mean() - 0.5)
    assert np.all(X[0, 256:] >= 0)
    with pytest.raises(enc.ShapeMismatch):
        enc.image_features([np.zeros((6, 6))])


def test_shape_mismatch():
    p = enc.init_params(0, hidden=4, dim=2)
    with pytest.raises(enc.ShapeMismatch):
        enc.forward(p, np.zeros((32, 32)))


def test_backward_trivial_cases():
    p = enc.init_params(5, pixels=64, hidden=6, dim=3, features="raw")
    _, tape = enc.forward(p, np.random.default_rng(5).random((8, 8)))
    zero = enc.backward(tape, np.zeros(3))
    assert all(not v.any() for v in zero.arrays().values())
    g = np.array([0.3, -1.0, 2.0])
    one, two = enc.backward(tape, g), enc.backward(tape, 2 * g)
    for a, b in zip(one.arrays().values(), two.arrays().values()):
        assert np.allclose(b, 2 * a, atol=1e-12, rtol=0)
    with pytest.raises(enc.TapeMismatch):
        enc.backward(tape, np.zeros(4))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("features", ["raw", "edges"])
def test_backward_matches_finite_differences(seed, features):
    r = np.random.default_rng(seed)
    p = enc.init_params(seed, pixels=64, hidden=6, dim=3, classes=2, features=features)
    p.b1 = r.normal(0, 0.1, p.b1.shape)
    p.b2 = r.normal(0, 0.1, p.b2.shape)
    imgs = list(r.random((2, 8, 8)))
    G = r.standard_normal((2, 3))
    _, tape = enc.forward_batch(p, imgs)
    grads = enc.backward(tape, G)

    for name in ("W1", "b1", "W2", "b2"):
        def f(value, name=name):
            q = p.copy()
            setattr(q, name, value)
            return float(np.sum(G * enc.forward_batch(q, imgs)[0]))
        num = numeric_grad(f, getattr(p, name), h=1e-4)
        # components below 1e-8 are compared absolutely through the floor
        assert rel_err(getattr(grads, name), num, floor=1e-8) < 1e-4, name


def test_checkpoint_round_trip(tmp_path):
    p = enc.init_params(7, hidden=10, dim=4, classes=3)
    enc.save_params(tmp_path / "m.ckpt", p)
    q = enc.load_params(tmp_path / "m.ckpt")
    assert q.equals(p)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"ASLP"
    width, hidden, dim, classes = p.dims
    assert len(raw) == 28 + 8 * (hidden * width + hidden + dim * hidden + dim + classes * dim)


def test_checkpoint_errors(tmp_path):
    p = enc.init_params(7, hidden=10, dim=4)
    path = tmp_path / "m.ckpt"
    enc.save_params(path, p)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(enc.CheckpointError):
        enc.load_params(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(enc.CheckpointError):
        enc.load_params(path)
