import numpy as np
import pytest

from mesostitch import autodiff as ad
from mesostitch import dipnet
from mesostitch.autodiff.gradcheck import check_gradients


def hand_count(filters, k_in=3):
    """Count block parameters layer by layer from the block definitions."""
    total = 0
    for k in filters:
        total += (9 * k_in * k + k) + 4 * k + (9 * k * k + k) + 4 * k
        k_in = k
    for k in reversed(filters):
        total += (9 * k_in * k + k) + 4 * k + (k * k + k) + 4 * k
        k_in = k
    return total


@pytest.mark.parametrize("filters, expected", [
    ((16, 16, 32, 32), 69424),
    ((16, 16, 16, 16), 28080),
    ((16, 16, 16, 32, 32), 76912),
    ((16, 16, 16, 16, 16), 35568),
    ((1,), 66),
])
def test_param_counts(filters, expected):
    arch = dipnet.Architecture(filters)
    assert dipnet.param_count(arch) == expected == hand_count(filters)
    assert dipnet.build(arch).block_parameter_count() == expected


def test_architecture_validation():
    with pytest.raises(dipnet.InvalidArchitecture):
        dipnet.Architecture(())
    with pytest.raises(dipnet.InvalidArchitecture):
        dipnet.Architecture((16, 0))
    assert dipnet.Architecture.parse("[16, 16, 32]").filters == (16, 16, 32)
    with pytest.raises(dipnet.InvalidArchitecture):
        dipnet.Architecture.parse("16,x")


def test_output_shape():
    net = dipnet.build(dipnet.Architecture((4, 4, 4, 4, 4)), seed=1)
    out = net(np.random.default_rng(0).random((1, 3, 256, 320)))
    assert out.shape == (1, 1, 256, 320)
    odd = net(np.random.default_rng(0).random((2, 3, 45, 61)))
    assert odd.shape == (2, 1, 45, 61)


def test_untrained_head_predicts_zero():
    net = dipnet.build(dipnet.Architecture((4, 4)), seed=0)
    assert np.all(net(np.random.default_rng(0).random((2, 3, 16, 16))).data == 0)


def _perturbed(seed=3, filters=(4, 8)):
    net = dipnet.build(dipnet.Architecture(filters), seed=seed, height_scale=0.5)
    rng = np.random.default_rng(seed)
    net.head_weight.data[:] = rng.normal(size=net.head_weight.shape)
    return net


def test_determinism_and_identical_frames():
    a, b = _perturbed(), _perturbed()
    img = np.random.default_rng(4).random((1, 3, 20, 24))
    batch = np.concatenate([img, img])
    out_a = a(batch).data
    assert np.array_equal(out_a, b(batch).data)
    assert np.array_equal(out_a[0], out_a[1])


def test_batch_order_invariance_with_frozen_statistics():
    net = _perturbed()
    imgs = np.random.default_rng(5).random((3, 3, 16, 16)).astype(np.float32)
    fwd = net(imgs, training=False).data
    rev = net(imgs[::-1], training=False).data
    assert np.allclose(fwd, rev[::-1], atol=1e-6)


def test_parameter_gradients_finite_difference():
    with ad.default_dtype(np.float64):
        net = dipnet.build(dipnet.Architecture((2, 3)), seed=2, dtype=np.float64)
        rng = np.random.default_rng(6)
        net.head_weight.data[:] = rng.normal(size=net.head_weight.shape)
        imgs = rng.random((2, 3, 8, 8))
        target = rng.normal(size=(2, 1, 8, 8))
        params = net.parameters()

        def loss(*_):
            out = net(imgs, training=True)
            return ad.square(out - target).sum()

        # conv biases ahead of batch norm have zero gradient; the floor absorbs FD noise there
        worst = check_gradients(loss, params, step=1e-6, n_probe=3, floor=1e-3)
    assert worst < 1e-3


def test_serialization_round_trip(tmp_path):
    net = _perturbed(filters=(4, 4, 8))
    imgs = np.random.default_rng(7).random((2, 3, 24, 24)).astype(np.float32)
    net(imgs, training=True)  # moves the running statistics
    path = tmp_path / "net.bin"
    net.save(path)
    back = dipnet.Network.load(path)
    assert back.arch == net.arch and back.height_scale == net.height_scale
    for a, b in zip(net.parameters(), back.parameters()):
        assert np.array_equal(a.data, b.data)
    assert np.array_equal(net(imgs, training=False).data, back(imgs, training=False).data)


def test_truncated_blob():
    blob = _perturbed().to_bytes()
    with pytest.raises(ValueError):
        dipnet.Network.from_bytes(blob[:-8])
    with pytest.raises(ValueError):
        dipnet.Network.from_bytes(b"NOTANET x=1\n")


def test_wrong_channels():
    net = dipnet.build(dipnet.Architecture((2,)))
    with pytest.raises(ad.ShapeMismatch):
        net(np.zeros((1, 4, 8, 8)))
