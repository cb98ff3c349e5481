"""Small CNN architectures, SGD training, inference and checkpoints."""

import hashlib
import io
import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ArchError, ChecksumError, LoadError, ShapeError, TrainingError, TruncatedError, VersionError
from .tensor import (Tensor, avgpool2d, backward, conv2d, flatten, linear, log_softmax, maxpool2d, nll_loss,
                     relu)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TLAB"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """A named stack of layers.

    Layer descriptors are tuples: ``("conv", out_channels, kernel, padding)``,
    ``("relu",)``, ``("maxpool", k)``, ``("avgpool", k)``, ``("flatten",)`` and
    ``("linear", out_features)``.
    """

    name: str
    layers: tuple
    input_shape: tuple = (1, 28, 28)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(l) for l in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    @property
    def class_count(self):
        return layer_shapes(self)[-1][0]

    def to_json(self):
        return {"name": self.name, "layers": [list(l) for l in self.layers], "input_shape": list(self.input_shape)}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["name"], tuple(tuple(l) for l in obj["layers"]), tuple(obj["input_shape"]))


def layer_shapes(arch):
    """Statically propagate per-sample shapes; raises ArchError if layers do not compose."""
    shape = tuple(arch.input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ArchError(f"{arch.name}: input shape must be (C, H, W) with positive entries, got {shape}")
    shapes = [shape]
    for i, layer in enumerate(arch.layers):
        kind = layer[0]
        where = f"{arch.name} layer {i} {layer}"
        if kind == "conv":
            if len(shape) != 3:
                raise ArchError(f"{where}: conv needs a (C, H, W) input, got {shape}")
            _, out, k, pad = layer
            c, h, w = shape
            if out < 1 or k < 1 or pad < 0 or k > h + 2 * pad or k > w + 2 * pad:
                raise ArchError(f"{where}: invalid conv for input {shape}")
            shape = (out, h + 2 * pad - k + 1, w + 2 * pad - k + 1)
        elif kind in ("maxpool", "avgpool"):
            k = layer[1]
            if len(shape) != 3 or k < 1 or shape[1] % k or shape[2] % k:
                raise ArchError(f"{where}: pool window does not divide {shape}")
            shape = (shape[0], shape[1] // k, shape[2] // k)
        elif kind in ("relu", "normalize"):
            pass
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "linear":
            if len(shape) != 1:
                raise ArchError(f"{where}: linear needs a flattened input, got {shape}")
            if layer[1] < 1:
                raise ArchError(f"{where}: linear needs a positive width")
            shape = (layer[1],)
        else:
            raise ArchError(f"{where}: unknown layer kind {kind!r}")
        shapes.append(shape)
    if len(shape) != 1:
        raise ArchError(f"{arch.name}: network must end in a flat class-score vector, ends in {shape}")
    if not arch.layers or arch.layers[-1][0] != "linear":
        raise ArchError(f"{arch.name}: the last layer must be linear (class scores)")
    return shapes[1:]


# Per-channel standardization with the usual MNIST pixel statistics.
MNIST_NORM = ("normalize", 0.1307, 0.3081)

ARCHS = {
    "cnn_a": ArchSpec("cnn_a", (
        MNIST_NORM,
        ("conv", 8, 3, 1), ("relu",), ("maxpool", 2),
        ("conv", 16, 3, 1), ("relu",), ("maxpool", 2),
        ("flatten",), ("linear", 64), ("relu",), ("linear", 10),
    )),
    "cnn_b": ArchSpec("cnn_b", (
        MNIST_NORM,
        ("conv", 6, 5, 2), ("relu",), ("maxpool", 2),
        ("conv", 12, 3, 1), ("relu",), ("maxpool", 2),
        ("conv", 24, 3, 1), ("relu",),
        ("flatten",), ("linear", 10),
    )),
    "cnn_c": ArchSpec("cnn_c", (
        MNIST_NORM,
        ("conv", 10, 3, 1), ("relu",), ("avgpool", 2),
        ("conv", 20, 5, 2), ("relu",), ("avgpool", 2),
        ("flatten",), ("linear", 32), ("relu",), ("linear", 10),
    )),
}


def get_arch(name):
    try:
        return ARCHS[name]
    except KeyError:
        raise ArchError(f"unknown architecture {name!r}; known: {', '.join(sorted(ARCHS))}") from None


@dataclass
class Network:
    arch: ArchSpec
    params: dict
    meta: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if not self.name:
            self.name = f"{self.arch.name}-s{self.meta.get('seed', 0)}"

    @property
    def input_shape(self):
        return self.arch.input_shape

    @property
    def class_count(self):
        return self.arch.class_count

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def forward(self, x):
        """Logits for a batch ``x[B, C, H, W]``."""
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name} expects input [B, {', '.join(map(str, self.input_shape))}], "
                             f"got {list(x.shape)}")
        h = x
        for i, layer in enumerate(self.arch.layers):
            kind = layer[0]
            if kind == "conv":
                h = conv2d(h, self.params[f"{i}.weight"], self.params[f"{i}.bias"], 1, layer[3])
            elif kind == "relu":
                h = relu(h)
            elif kind == "normalize":
                h = (h - h.dtype.type(layer[1])) * h.dtype.type(1.0 / layer[2])
            elif kind == "maxpool":
                h = maxpool2d(h, layer[1])
            elif kind == "avgpool":
                h = avgpool2d(h, layer[1])
            elif kind == "flatten":
                h = flatten(h)
            elif kind == "linear":
                h = linear(h, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
        return h

    __call__ = forward

    def copy(self, requires_grad=False, dtype=None):
        params = {k: Tensor(v.data.astype(dtype or v.dtype, copy=True), requires_grad=requires_grad)
                  for k, v in self.params.items()}
        return Network(self.arch, params, dict(self.meta), self.name)

    def astype(self, dtype):
        return self.copy(dtype=dtype)

    def payload(self):
        return b"".join(p.data.astype("<f4").tobytes() for p in self.params.values())

    def param_hash(self):
        return hashlib.sha256(self.payload()).hexdigest()[:16]


def param_manifest(arch):
    """Ordered (name, shape) pairs implied by the architecture."""
    shapes = [tuple(arch.input_shape)] + layer_shapes(arch)
    manifest = []
    for i, layer in enumerate(arch.layers):
        if layer[0] == "conv":
            manifest.append((f"{i}.weight", (layer[1], shapes[i][0], layer[2], layer[2])))
            manifest.append((f"{i}.bias", (layer[1],)))
        elif layer[0] == "linear":
            manifest.append((f"{i}.weight", (layer[1], shapes[i][0])))
            manifest.append((f"{i}.bias", (layer[1],)))
    return manifest


def build(arch, seed, dtype=np.float32):
    """Seeded initialisation: weights U(±sqrt(6/fan_in)), biases U(±1/sqrt(fan_in))."""
    if isinstance(arch, str):
        arch = get_arch(arch)
    gen = rng.generator(seed, 0xA7C4)
    params = {}
    for name, shape in param_manifest(arch):
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(gen.uniform(-bound, bound, size=shape).astype(dtype))
    return Network(arch, params, {"seed": int(seed)})


def predict(net, images, batch_size=500):
    """Return ``(labels, log_probs)``; argmax ties resolve to the lowest class index."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    if data.ndim != 4 or tuple(data.shape[1:]) != net.input_shape:
        raise ShapeError(f"{net.name} expects images [B, {', '.join(map(str, net.input_shape))}], "
                         f"got {list(data.shape)}")
    chunks = [log_softmax(net(Tensor(data[i:i + batch_size], dtype=net.dtype))).data
              for i in range(0, len(data), batch_size)]
    lp = np.concatenate(chunks) if chunks else np.zeros((0, net.class_count), dtype=net.dtype)
    return lp.argmax(axis=1), Tensor(lp)


def accuracy(net, images, labels):
    pred, _ = predict(net, images)
    return float(np.mean(pred == np.asarray(labels))) if len(pred) else float("nan")


# Recipe used by the CLI and the test fixtures on the 4000-image training split.
TRAIN_DEFAULTS = {"epochs": 12, "lr": 0.02, "batch": 128}


def train(net, data, epochs, lr, batch=64, seed=0, test=None, momentum=0.9):
    """Minibatch SGD with momentum on the NLL loss; returns a new trained Network."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if int(np.max(data.labels)) >= net.class_count:
        raise ValueError(f"labels exceed class count {net.class_count}")
    out = net.copy(requires_grad=True)
    velocity = {k: np.zeros_like(p.data) for k, p in out.params.items()}
    step = out.dtype.type(lr)
    mom = out.dtype.type(momentum)
    n = len(data)
    for epoch in range(1, epochs + 1):
        order = rng.generator(seed, 0x7EA1, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss = nll_loss(log_softmax(out(Tensor(data.images[idx], dtype=out.dtype))), data.labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(epoch)
            backward(loss)
            for k, p in out.params.items():
                velocity[k] = mom * velocity[k] + p.grad
                p.data = p.data - step * velocity[k]
                p.grad = None
            total += float(loss.data) * len(idx)
        if not all(np.all(np.isfinite(p.data)) for p in out.params.values()):
            raise TrainingError(epoch)
        log.info("%s epoch %d: mean loss %.4f", out.name, epoch, total / n)
    for p in out.params.values():
        p.requires_grad = False
    out.meta.update(epochs=int(epochs), lr=float(lr), batch=int(batch), train_seed=int(seed),
                    train_acc=accuracy(out, data.images, data.labels))
    if test is not None:
        out.meta["test_acc"] = accuracy(out, test.images, test.labels)
    return out


# checkpoints -----------------------------------------------------------------

def atomic_write(path, blob):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(net):
    header = {
        "arch": net.arch.to_json(),
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "seed": int(net.meta.get("seed", 0)),
        "name": net.name,
        "meta": net.meta,
        "params": [[k, list(p.shape)] for k, p in net.params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = net.payload()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    buf.write(payload)
    buf.write(struct.pack("<I", zlib.crc32(payload)))
    return buf.getvalue()


def save(net, path):
    atomic_write(path, checkpoint_bytes(net))


def read_file_header(fh, magic, version, what):
    head = fh.read(12)
    if len(head) < 12:
        raise TruncatedError(f"{what}: file too short for header")
    if head[:4] != magic:
        raise LoadError(f"{what}: bad magic {head[:4]!r}, expected {magic!r}")
    ver, hlen = struct.unpack("<II", head[4:])
    if ver != version:
        raise VersionError(f"{what}: unsupported format version {ver} (expected {version})")
    hbytes = fh.read(hlen)
    if len(hbytes) < hlen:
        raise TruncatedError(f"{what}: header truncated")
    try:
        return json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{what}: corrupt header ({exc})") from None


def read_header(path):
    """Checkpoint header only; the parameter payload is not read."""
    with open(path, "rb") as fh:
        return read_file_header(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, os.fspath(path))


def read_payload(fh, nbytes, what):
    payload = fh.read(nbytes)
    crc = fh.read(4)
    if len(payload) < nbytes or len(crc) < 4:
        raise TruncatedError(f"{what}: payload truncated")
    if fh.read(1):
        raise LoadError(f"{what}: trailing bytes after checksum")
    if struct.unpack("<I", crc)[0] != zlib.crc32(payload):
        raise ChecksumError(f"{what}: CRC32 mismatch, file is corrupted")
    return payload


def load(path):
    what = os.fspath(path)
    with open(path, "rb") as fh:
        header = read_file_header(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, what)
        arch = ArchSpec.from_json(header["arch"])
        manifest = [(k, tuple(s)) for k, s in header["params"]]
        if manifest != param_manifest(arch):
            raise LoadError(f"{what}: parameter manifest does not match architecture {arch.name}")
        sizes = [int(np.prod(s)) for _, s in manifest]
        payload = read_payload(fh, 4 * sum(sizes), what)
    flat = np.frombuffer(payload, dtype="<f4")
    params, offset = {}, 0
    for (k, shape), size in zip(manifest, sizes):
        params[k] = Tensor(flat[offset:offset + size].reshape(shape).astype(np.float32))
        offset += size
    return Network(arch, params, header.get("meta", {"seed": header["seed"]}), header.get("name", ""))
