"""Sign-gradient attack engine with Monte Carlo averaging over input samplers.

The per-iteration direction is the gradient of the attack loss averaged over
N transformed copies ``x'_i`` of the clean image, each evaluated at
``x'_i + delta``. With the identity sampler and N = 1 this is the ordinary
gradient at ``x + delta``. All step rules ascend the loss; for the CW margin
the ascended objective is the negated margin.
"""

import io
import json
import os
import struct
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import rng
from . import transforms as tf
from .errors import AttackError, ConfigError, ShapeError
from .nn import read_file_header, atomic_write, read_payload
from .tensor import Tensor, backward, clamp_st, cw_margin, log_softmax, mul, nll_loss, reshape

BATCH_MAGIC = b"TADV"
BATCH_VERSION = 1

METHODS = ("fgsm", "bim", "pgd", "mi", "vt")
LOSSES = ("nll", "cw_margin")

# desk-scale defaults: 16/255, 2/255 and a 56-pixel patch on 224-pixel images, rescaled to 28 pixels
DEFAULT_EPSILON = 0.1
DEFAULT_ALPHA = 0.0125
DEFAULT_ITERS = 10
DEFAULT_PATCH = 7


class DegenerateStepWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class AttackSpec:
    name: str = ""
    method: str = "bim"
    loss: str = "nll"
    epsilon: float = DEFAULT_EPSILON
    alpha: float = DEFAULT_ALPHA
    T: int = DEFAULT_ITERS
    transform: tf.TransformSpec = field(default_factory=tf.identity)
    N: int = None
    mu: float = 1.0
    beta: float = 1.5
    K: int = 5
    kappa: float = 0.0
    seed: int = 0
    pgd_init: str = "uniform"

    def __post_init__(self):
        if isinstance(self.transform, str):
            object.__setattr__(self, "transform", tf.parse_transform(self.transform))
        if not self.name:
            object.__setattr__(self, "name", self.method)
        if self.method not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown attack loss {self.loss!r}; expected one of {', '.join(LOSSES)}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.epsilon > 0 and not 0.0 < self.alpha <= self.epsilon:
            raise ConfigError(f"step size alpha must satisfy 0 < alpha <= epsilon, got alpha={self.alpha}, "
                              f"epsilon={self.epsilon}")
        if self.T < 1:
            raise ConfigError("T (iterations) must be at least 1")
        if self.N is not None and self.N < 1:
            raise ConfigError("N (samples per iteration) must be at least 1")
        if self.method == "fgsm" and (self.T != 1 or self.alpha != self.epsilon):
            raise ConfigError("fgsm requires T=1 and alpha=epsilon")
        if self.method == "vt" and self.K < 1:
            raise ConfigError("vt requires K >= 1")
        if self.pgd_init not in ("uniform", "zero"):
            raise ConfigError(f"pgd_init must be uniform or zero, got {self.pgd_init!r}")

    def samples(self, H, W):
        return self.N if self.N is not None else tf.default_samples(self.transform, H, W)

    def to_json(self):
        out = asdict(self)
        out["transform"] = str(self.transform)
        return out

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


def preset(name, epsilon=DEFAULT_EPSILON, alpha=DEFAULT_ALPHA, T=DEFAULT_ITERS, seed=0, s=DEFAULT_PATCH, N=None):
    """Named attack configurations used by the CLI and the evaluation harness."""
    base = dict(name=name, epsilon=epsilon, alpha=alpha, T=T, seed=seed, N=N)
    sampler = {
        "maskblock": tf.maskblock(s),
        "maskblock_diag": tf.maskblock(s, mode="diagonal"),
        "vr": tf.TransformSpec("gaussian_noise"),
        "di": tf.TransformSpec("resize_pad"),
        "ti": tf.TransformSpec("translate"),
        "sim": tf.TransformSpec("scale"),
        "admix": tf.TransformSpec("admix"),
        "ig": tf.TransformSpec("path_mix"),
    }
    if name == "fgsm":
        return AttackSpec(**{**base, "alpha": epsilon, "T": 1}, method="fgsm")
    if name in ("bim", "pgd", "mi", "vt"):
        return AttackSpec(**base, method=name)
    if name == "cw":
        return AttackSpec(**base, method="bim", loss="cw_margin")
    if name in sampler:
        return AttackSpec(**base, method="bim", transform=sampler[name])
    if name == "hybrid":
        return AttackSpec(**base, method="mi", transform=tf.ensemble(tf.all_samplers(s)))
    raise ConfigError(f"unknown attack preset {name!r}; known: {', '.join(PRESETS)}")


PRESETS = ("fgsm", "bim", "pgd", "mi", "vt", "cw", "maskblock", "maskblock_diag", "vr", "di", "ti", "sim",
           "admix", "ig", "hybrid")


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    deltas: np.ndarray
    labels: np.ndarray
    spec: AttackSpec
    proxy_id: str = ""
    proxy_name: str = ""

    def __post_init__(self):
        self.originals = np.asarray(self.originals, dtype=np.float32)
        self.deltas = np.asarray(self.deltas, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.originals.shape != self.deltas.shape or len(self.labels) != len(self.originals):
            raise ShapeError(f"inconsistent batch: originals {self.originals.shape}, deltas {self.deltas.shape}, "
                             f"labels {self.labels.shape}")

    @property
    def adversarial(self):
        return self.originals + self.deltas

    def __len__(self):
        return len(self.labels)


def _attack_objective(logits, labels, loss, kappa):
    if loss == "nll":
        return nll_loss(log_softmax(logits), labels)
    return mul(cw_margin(logits, labels, kappa), -1.0)


def _mc_grad(net, x, y, delta, transform, N, loss, seed, iteration, image_ids, kappa=0.0):
    B = len(x)
    draws = [tf.apply_array(transform, x, rng.derive(seed, iteration, i), i, image_ids) for i in range(N)]
    xs = Tensor(np.stack(draws))
    d = Tensor(delta, requires_grad=True)
    inputs = clamp_st(reshape(xs + d, (N * B,) + x.shape[1:]), 0.0, 1.0)
    objective = _attack_objective(net(inputs), np.tile(y, N), loss, kappa)
    backward(objective)
    return d.grad


def mc_gradient(net, x, y, delta, transform, N, loss="nll", seed=0, iteration=0, image_ids=None, kappa=0.0):
    """Gradient w.r.t. ``delta`` of the attack loss averaged over N sampled inputs."""
    x = np.asarray(x, dtype=net.dtype)
    delta = np.asarray(delta, dtype=net.dtype)
    if x.shape != delta.shape:
        raise ShapeError(f"x {x.shape} and delta {delta.shape} must have equal shapes")
    ids = np.arange(len(x)) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    return Tensor(_mc_grad(net, x, np.asarray(y), delta, transform, N, loss, seed, iteration, ids, kappa))


def project_linf(delta, epsilon, x):
    """Clamp ``delta`` to the L-inf ball, then adjust it so ``x + delta`` stays in [0, 1]."""
    delta = np.asarray(delta)
    x = np.asarray(x, dtype=delta.dtype)
    eps = delta.dtype.type(epsilon)
    out = np.clip(delta, -eps, eps)
    total = x + out
    out = np.where(total > 1, 1 - x, np.where(total < 0, -x, out))
    # rounding can leave x + delta one ulp outside the box
    while True:
        total = x + out
        hi, lo = total > 1, total < 0
        if not (hi.any() or lo.any()):
            return out
        out = np.where(hi, np.nextafter(out, -np.inf), np.where(lo, np.nextafter(out, np.inf), out))


def momentum_update(m_prev, g, mu):
    """``mu * m_prev + g / ||g||_1`` with the L1 norm taken per leading-axis sample."""
    m_prev, g = np.asarray(m_prev), np.asarray(g)
    if m_prev.shape != g.shape:
        raise ShapeError(f"momentum shape {m_prev.shape} does not match gradient {g.shape}")
    axes = tuple(range(1, g.ndim)) if g.ndim > 1 else None
    norm = np.abs(g).sum(axis=axes, keepdims=True)
    zero = norm == 0
    if np.any(zero):
        warnings.warn("zero gradient: momentum step keeps only the decayed history", DegenerateStepWarning,
                      stacklevel=2)
    scaled = np.divide(g, norm, out=np.zeros_like(g), where=~zero)
    return g.dtype.type(mu) * m_prev + scaled


def _craft_chunk(spec, net, x, y, ids, monitor):
    B, C, H, W = x.shape
    dtype = x.dtype
    eps, alpha = dtype.type(spec.epsilon), dtype.type(spec.alpha)
    N = spec.samples(H, W)
    if spec.method == "pgd" and spec.pgd_init == "uniform":
        delta = np.stack([rng.generator(spec.seed, i, 0x96D).uniform(-spec.epsilon, spec.epsilon, x.shape[1:])
                          for i in ids]).astype(dtype)
        delta = project_linf(delta, eps, x)
    else:
        delta = np.zeros_like(x)
    momentum = np.zeros_like(x)
    variance = np.zeros_like(x)
    for t in range(spec.T):
        g = _mc_grad(net, x, y, delta, spec.transform, N, spec.loss, spec.seed, t, ids, spec.kappa)
        if not np.all(np.isfinite(g)):
            raise AttackError(t)
        if spec.method == "mi":
            momentum = momentum_update(momentum, g, spec.mu)
            direction = np.sign(momentum)
        elif spec.method == "vt":
            direction = np.sign(g + variance)
            radius = spec.beta * spec.epsilon
            neighbours = np.zeros_like(x)
            for k in range(spec.K):
                r = np.stack([rng.generator(spec.seed, i, t, k, 0x7A).uniform(-radius, radius, x.shape[1:])
                              for i in ids]).astype(dtype)
                gk = _mc_grad(net, x, y, delta + r, spec.transform, N, spec.loss, rng.derive(spec.seed, 0x7A, k),
                              t, ids, spec.kappa)
                neighbours += gk
            variance = neighbours / dtype.type(spec.K) - g
            if not np.all(np.isfinite(variance)):
                raise AttackError(t)
        else:
            direction = np.sign(g)
        delta = project_linf(delta + alpha * direction.astype(dtype), eps, x)
        if monitor is not None:
            monitor(t, ids, x, delta)
    return delta


def craft(spec, net, x, y, image_ids=None, batch_size=100, threads=1, monitor=None):
    """Run the attack on ``x`` (values in [0, 1]) and return an AdversarialBatch.

    ``monitor(t, image_ids, x, delta)``, if given, is called after every
    iteration of every chunk.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4 or tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(f"{net.name} expects images [B, {', '.join(map(str, net.input_shape))}], got {list(x.shape)}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ConfigError("attack inputs must lie in [0, 1]")
    ids = np.arange(len(x)) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    if spec.transform.kind in ("admix", "ensemble") and spec.transform.pool is None:
        spec = replace(spec, transform=spec.transform.with_pool(x))
    starts = range(0, len(x), batch_size)

    def run(start):
        sl = slice(start, start + batch_size)
        return _craft_chunk(spec, net, x[sl], y[sl], ids[sl], monitor)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    deltas = np.concatenate(parts) if parts else np.zeros_like(x)
    return AdversarialBatch(x, deltas, y, spec, net.param_hash(), net.name)


# batch files -----------------------------------------------------------------

def batch_bytes(batch):
    header = {
        "spec": batch.spec.to_json(),
        "proxy": batch.proxy_id,
        "proxy_name": batch.proxy_name,
        "count": len(batch),
        "shape": list(batch.originals.shape),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = (batch.originals.astype("<f4").tobytes() + batch.deltas.astype("<f4").tobytes()
               + batch.labels.astype("<i8").tobytes())
    buf = io.BytesIO()
    buf.write(BATCH_MAGIC)
    buf.write(struct.pack("<II", BATCH_VERSION, len(hbytes)))
    buf.write(hbytes)
    buf.write(payload)
    buf.write(struct.pack("<I", zlib.crc32(payload)))
    return buf.getvalue()


def save_batch(batch, path):
    atomic_write(path, batch_bytes(batch))


def load_batch(path):
    what = os.fspath(path)
    with open(path, "rb") as fh:
        header = read_file_header(fh, BATCH_MAGIC, BATCH_VERSION, what)
        shape = tuple(header["shape"])
        n = int(np.prod(shape))
        payload = read_payload(fh, 8 * n + 8 * header["count"], what)
    originals = np.frombuffer(payload[:4 * n], dtype="<f4").reshape(shape)
    deltas = np.frombuffer(payload[4 * n:8 * n], dtype="<f4").reshape(shape)
    labels = np.frombuffer(payload[8 * n:], dtype="<i8")
    return AdversarialBatch(originals.astype(np.float32), deltas.astype(np.float32), labels.astype(np.int64),
                            AttackSpec.from_json(header["spec"]), header["proxy"], header.get("proxy_name", ""))
