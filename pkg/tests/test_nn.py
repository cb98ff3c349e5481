import hashlib
import os

import numpy as np
import pytest

from tlab import nn
from tlab.data import LabeledDataset
from tlab.errors import ArchError, ChecksumError, LoadError, ShapeError, TrainingError, TruncatedError, VersionError
from tlab.tensor import Tensor


def params_digest(net):
    return hashlib.sha256(b"".join(p.data.tobytes() for p in net.params.values())).hexdigest()


def tiny_data(n=40, seed=0):
    r = np.random.default_rng(seed)
    return LabeledDataset(r.random((n, 1, 28, 28)), r.integers(0, 10, n))


def test_archs_compose_and_differ():
    assert {"cnn_a", "cnn_b"} <= set(nn.ARCHS)
    for arch in nn.ARCHS.values():
        assert nn.layer_shapes(arch)[-1] == (10,)
    assert nn.param_manifest(nn.ARCHS["cnn_a"]) != nn.param_manifest(nn.ARCHS["cnn_b"])


@pytest.mark.parametrize("layers", [
    (("conv", 4, 3, 0), ("linear", 10)),
    (("conv", 4, 3, 1), ("maxpool", 3), ("flatten",), ("linear", 10)),
    (("conv", 4, 3, 1), ("flatten",)),
    (("flatten",), ("linear", 10), ("dropout",)),
    (("conv", 4, 40, 0), ("flatten",), ("linear", 10)),
])
def test_invalid_archs_rejected(layers):
    with pytest.raises(ArchError):
        nn.build(nn.ArchSpec("bad", layers), 0)


def test_build_is_seeded():
    a, b = nn.build("cnn_a", 1), nn.build("cnn_a", 1)
    assert params_digest(a) == params_digest(b)
    assert params_digest(a) != params_digest(nn.build("cnn_a", 2))


def test_untrained_accuracy_near_chance(test_set):
    for seed in range(5):
        acc = nn.accuracy(nn.build("cnn_a", seed), test_set.images, test_set.labels)
        assert 0.05 <= acc <= 0.20


def test_lr_zero_leaves_params_unchanged():
    net = nn.build("cnn_b", 3)
    trained = nn.train(net, tiny_data(), epochs=1, lr=0.0, batch=16, seed=0)
    assert params_digest(trained) == params_digest(net)


def test_training_is_deterministic():
    data = tiny_data(64, 1)
    runs = [nn.train(nn.build("cnn_a", 5), data, epochs=2, lr=0.05, batch=16, seed=9) for _ in range(2)]
    assert params_digest(runs[0]) == params_digest(runs[1])
    assert params_digest(runs[0]) != params_digest(nn.build("cnn_a", 5))


def test_divergence_names_epoch():
    with pytest.raises(TrainingError) as info:
        nn.train(nn.build("cnn_a", 0), tiny_data(), epochs=3, lr=1e30, batch=8, seed=0)
    assert info.value.epoch == 1
    assert "epoch 1" in str(info.value)


def test_trained_fixture_accuracy(proxy):
    assert proxy.meta["test_acc"] >= 0.95


def test_predict_contract(proxy, test_set):
    images = test_set.images[:200]
    before = params_digest(proxy)
    labels, lp = nn.predict(proxy, images)
    labels2, lp2 = nn.predict(proxy, images)
    assert params_digest(proxy) == before
    assert labels.tobytes() == labels2.tobytes() and lp.data.tobytes() == lp2.data.tobytes()
    np.testing.assert_allclose(np.exp(lp.data.astype(np.float64)).sum(axis=1), 1.0, atol=1e-5)
    manual = [max(range(10), key=lambda c: (row[c], -c)) for row in lp.data]
    assert list(labels) == manual


def test_predict_ties_pick_lowest_class():
    net = nn.build("cnn_a", 0)
    for p in net.params.values():
        p.data = np.zeros_like(p.data)
    labels, _ = nn.predict(net, np.random.default_rng(0).random((3, 1, 28, 28)))
    assert list(labels) == [0, 0, 0]


def test_predict_shape_error():
    with pytest.raises(ShapeError):
        nn.predict(nn.build("cnn_a", 0), np.zeros((2, 1, 27, 28)))


def test_float64_gradients_each_arch():
    r = np.random.default_rng(0)
    x = r.random((2, 1, 28, 28))
    y = np.array([3, 7])
    from tlab.tensor import log_softmax, nll_loss
    for name in nn.ARCHS:
        net = nn.build(name, 4).copy(requires_grad=True, dtype=np.float64)
        xt = Tensor(x, requires_grad=True)
        nll_loss(log_softmax(net(xt)), y).backward()

        def loss(v):
            return nll_loss(log_softmax(net(Tensor(v))), y).item()

        for _ in range(5):
            idx = tuple(r.integers(0, n) for n in x.shape)
            xp, xm = x.copy(), x.copy()
            xp[idx] += 1e-5
            xm[idx] -= 1e-5
            num = (loss(xp) - loss(xm)) / 2e-5
            assert abs(num - xt.grad[idx]) <= 1e-5 * max(abs(num), 1e-3)


def test_checkpoint_round_trip(tmp_path):
    net = nn.build("cnn_b", 11)
    net.meta["test_acc"] = 0.5
    path = tmp_path / "m.tlab"
    nn.save(net, path)
    back = nn.load(path)
    assert back.arch == net.arch and back.name == net.name
    for k in net.params:
        assert back.params[k].data.tobytes() == net.params[k].data.tobytes()
    blob = path.read_bytes()
    assert blob[:4] == b"TLAB"
    assert int.from_bytes(blob[4:8], "little") == nn.CHECKPOINT_VERSION
    header = nn.read_header(path)
    assert header["arch"]["name"] == "cnn_b"
    assert header["params"][0] == ["1.weight", [6, 1, 5, 5]]


def test_header_only_inspection_skips_payload(tmp_path):
    path = tmp_path / "m.tlab"
    nn.save(nn.build("cnn_a", 0), path)
    hlen = int.from_bytes(path.read_bytes()[8:12], "little")
    path.write_bytes(path.read_bytes()[:12 + hlen])
    assert nn.read_header(path)["arch"]["name"] == "cnn_a"
    with pytest.raises(TruncatedError):
        nn.load(path)


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.tlab"
    nn.save(nn.build("cnn_a", 0), path)
    blob = bytearray(path.read_bytes())
    hlen = int.from_bytes(blob[8:12], "little")
    blob[12 + hlen + 100] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        nn.load(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "m.tlab"
    nn.save(nn.build("cnn_a", 0), path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionError):
        nn.load(path)
    path.write_bytes(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(LoadError):
        nn.load(path)


def test_save_is_atomic_and_leaves_no_temp(tmp_path):
    path = tmp_path / "m.tlab"
    nn.save(nn.build("cnn_a", 0), path)
    nn.save(nn.build("cnn_a", 1), path)
    assert os.listdir(tmp_path) == ["m.tlab"]


def test_loss_curve_endpoints(proxy, test_set):
    from tlab.transforms import loss_preservation_curve
    rows = loss_preservation_curve(proxy, test_set.subset(200, 0), [0, 28], draws_per_image=2)
    assert rows[0][1] == rows[0][2]
    assert rows[1][1] >= rows[1][2]
