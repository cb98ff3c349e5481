"""Input samplers x' ~ q(x') around a clean image.

Each sampler maps a batch ``x[B, C, H, W]`` to a same-shaped batch of
semantically close variants. Randomness is addressed per image:
``(draw_seed, image_id)`` fully determines the variant of one image, so a
draw does not depend on how images are batched.

MaskBlock zeroes one block of an s×s patch grid. In ``grid`` mode any cell
may be chosen; ``diagonal`` mode ties the row and column block index to a
single ``u`` exactly as the index bounds are usually written. Block ranges
are half-open and clipped at the image border.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ConfigError
from .tensor import Tensor, log_softmax, nll_loss

KINDS = ("identity", "maskblock", "gaussian_noise", "resize_pad", "translate", "scale", "admix", "path_mix",
         "ensemble")

DEFAULTS = {
    "identity": {},
    "maskblock": {"s": 7, "mode": "grid", "identity": True, "sampling": "enumerate"},
    "gaussian_noise": {"sigma": 0.05},
    "resize_pad": {"p": 0.7, "rmin": 0.85},
    "translate": {"t": 3},
    "scale": {"m": 4},
    "admix": {"gamma": 0.2},
    "path_mix": {"m": 4},
    "ensemble": {},
}

# draws per iteration when N is not given explicitly, for the random samplers
RANDOM_DEFAULT_SAMPLES = 5


@dataclass(frozen=True, eq=False)
class TransformSpec:
    kind: str = "identity"
    params: dict = field(default_factory=dict)
    members: tuple = ()
    weights: tuple = ()
    pool: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        merged = dict(DEFAULTS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ConfigError(f"unknown parameter(s) for {self.kind}: {', '.join(sorted(unknown))}")
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        _validate(self)

    def __eq__(self, other):
        return isinstance(other, TransformSpec) and str(self) == str(other)

    def __hash__(self):
        return hash(str(self))

    def __str__(self):
        if self.kind == "ensemble":
            return "ensemble:" + "+".join(f"{m}@{w!r}" for m, w in zip(self.members, self.weights))
        if not self.params:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))

    def with_pool(self, pool):
        """Bind a reference image pool (needed by admix, also inside ensembles)."""
        pool = None if pool is None else np.asarray(pool, dtype=np.float32)
        members = tuple(m.with_pool(pool) for m in self.members)
        return TransformSpec(self.kind, dict(self.params), members, self.weights, pool)

    def with_params(self, **params):
        return TransformSpec(self.kind, {**self.params, **params}, self.members, self.weights, self.pool)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def _validate(spec):
    p = spec.params
    k = spec.kind
    if k == "maskblock":
        if not isinstance(p["s"], (int, np.integer)) or isinstance(p["s"], bool) or p["s"] < 1:
            raise ConfigError(f"maskblock patch size must be a positive integer, got s={p['s']} "
                              "(an unmasked baseline is expressed as the identity transform)")
        if p["mode"] not in ("grid", "diagonal"):
            raise ConfigError(f"maskblock mode must be grid or diagonal, got {p['mode']!r}")
        if p["sampling"] not in ("enumerate", "random"):
            raise ConfigError(f"maskblock sampling must be enumerate or random, got {p['sampling']!r}")
    elif k == "gaussian_noise" and not p["sigma"] >= 0:
        raise ConfigError("gaussian_noise sigma must be non-negative")
    elif k == "resize_pad" and not (0 <= p["p"] <= 1 and 0 < p["rmin"] <= 1):
        raise ConfigError("resize_pad needs 0 <= p <= 1 and 0 < rmin <= 1")
    elif k == "translate" and not (isinstance(p["t"], (int, np.integer)) and p["t"] >= 0):
        raise ConfigError("translate t must be a non-negative integer")
    elif k in ("scale", "path_mix") and not (isinstance(p["m"], (int, np.integer)) and p["m"] >= 1):
        raise ConfigError(f"{k} m must be a positive integer")
    elif k == "ensemble":
        if not spec.members:
            raise ConfigError("ensemble needs at least one member transform")
        w = np.asarray(spec.weights, dtype=float)
        if len(w) != len(spec.members) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"ensemble weights must be non-negative and sum to 1, got {list(spec.weights)}")


def identity():
    return TransformSpec("identity")


def maskblock(s=7, mode="grid", include_identity=True, sampling="enumerate"):
    return TransformSpec("maskblock", {"s": s, "mode": mode, "identity": include_identity, "sampling": sampling})


def ensemble(specs, weights=None):
    specs = tuple(specs)
    if not specs:
        raise ConfigError("ensemble needs at least one member transform")
    if weights is None:
        weights = [1.0 / len(specs)] * len(specs)
    return TransformSpec("ensemble", {}, specs, tuple(float(w) for w in weights))


def all_samplers(s=7):
    """Every non-trivial sampler with default settings (used by the hybrid attack)."""
    return [maskblock(s)] + [TransformSpec(k) for k in
                             ("gaussian_noise", "resize_pad", "translate", "scale", "admix", "path_mix")]


# parsing ---------------------------------------------------------------------

def _coerce(text):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_transform(text):
    """Parse ``kind:key=val,key=val``; ensembles are ``ensemble:a@w+b:k=v@w``."""
    text = text.strip()
    if not text:
        raise ConfigError("empty transform string")
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    if kind not in KINDS:
        raise ConfigError(f"unknown transform kind {kind!r} in {text!r}")
    if kind == "ensemble":
        if not rest:
            raise ConfigError(f"ensemble needs members in {text!r}")
        members, weights = [], []
        for token in rest.split("+"):
            body, at, w = token.rpartition("@")
            if not at:
                body, w = token, None
            members.append(parse_transform(body))
            try:
                weights.append(None if w is None else float(w))
            except ValueError:
                raise ConfigError(f"bad ensemble weight {w!r} in {text!r}") from None
        if all(w is None for w in weights):
            weights = None
        elif any(w is None for w in weights):
            raise ConfigError(f"either all or no ensemble members carry a weight: {text!r}")
        return ensemble(members, weights)
    params = {}
    if rest:
        for token in rest.split(","):
            key, eq, val = token.partition("=")
            if not eq or not key.strip() or not val.strip():
                raise ConfigError(f"bad transform parameter {token!r} in {text!r}")
            key = key.strip()
            if key not in DEFAULTS[kind]:
                raise ConfigError(f"unknown parameter {key!r} for {kind} in {text!r}")
            params[key] = _coerce(val.strip())
    return TransformSpec(kind, params)


# masks -----------------------------------------------------------------------

def _mask_index_limit(s, n, include_identity):
    # legal indices per axis: {0..floor(n/s)} or, without the empty endpoint, {0..ceil(n/s)-1}
    return n // s if include_identity else math.ceil(n / s) - 1


def mask_draws(spec, H, W):
    """The enumerated draw list for a maskblock spec; ``None`` marks the unmasked draw."""
    p = spec.params
    s = p["s"]
    if p["mode"] == "diagonal":
        return [u if s * u < min(H, W) else None
                for u in range(_mask_index_limit(s, min(H, W), p["identity"]) + 1)]
    cells = [(r, c) for r in range(math.ceil(H / s)) for c in range(math.ceil(W / s))]
    if p["identity"] and H % s == 0:
        cells.append(None)
    return cells


def make_mask(spec, u, H, W):
    """0/1 mask ``[1, 1, H, W]`` zeroing block ``u`` (an int in diagonal mode, ``(u_r, u_c)`` in grid mode)."""
    if isinstance(spec, MaskSpec):
        spec = maskblock(spec.s, spec.mode, spec.include_identity)
    p = spec.params
    s = p["s"]
    if p["mode"] == "diagonal":
        if isinstance(u, (tuple, list)) or u is None:
            raise IndexError(f"diagonal mode takes a single block index, got {u!r}")
        ur = uc = int(u)
        limit_r = limit_c = _mask_index_limit(s, min(H, W), p["identity"])
    else:
        if u is None or not isinstance(u, (tuple, list)) or len(u) != 2:
            raise IndexError(f"grid mode takes a (row, col) block index, got {u!r}")
        ur, uc = int(u[0]), int(u[1])
        limit_r = _mask_index_limit(s, H, p["identity"])
        limit_c = _mask_index_limit(s, W, p["identity"])
    if not (0 <= ur <= limit_r and 0 <= uc <= limit_c):
        raise IndexError(f"block index {u!r} outside the legal set for s={s}, H={H}, W={W}")
    mask = np.ones((1, 1, H, W), dtype=np.float32)
    mask[:, :, s * ur:min(s * (ur + 1), H), s * uc:min(s * (uc + 1), W)] = 0.0
    return Tensor(mask)


@dataclass(frozen=True)
class MaskSpec:
    s: int
    mode: str = "grid"
    include_identity: bool = True

    def __post_init__(self):
        if self.s < 1:
            raise ConfigError("mask patch size must be positive")


def _entry_mask(entry, spec, H, W):
    if entry is None:
        return None
    return make_mask(spec, entry, H, W).data


# sampling --------------------------------------------------------------------

def _resize_nearest(img, r):
    H, W = img.shape[-2:]
    rows = (np.arange(r) * H // r)
    cols = (np.arange(r) * W // r)
    return img[:, rows][:, :, cols]


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    H, W = img.shape[-2:]
    src_r = slice(max(0, -dy), min(H, H - dy))
    dst_r = slice(max(0, dy), min(H, H + dy))
    src_c = slice(max(0, -dx), min(W, W - dx))
    dst_c = slice(max(0, dx), min(W, W + dx))
    out[:, dst_r, dst_c] = img[:, src_r, src_c]
    return out


def apply_array(spec, x, draw_seed, index, image_ids):
    kind, p = spec.kind, spec.params
    B, C, H, W = x.shape
    if kind == "identity":
        return x.copy()
    if kind == "maskblock":
        draws = mask_draws(spec, H, W)
        if p["sampling"] == "enumerate":
            mask = _entry_mask(draws[index % len(draws)], spec, H, W)
            return x.copy() if mask is None else x * mask
        out = x.copy()
        for b, img_id in enumerate(image_ids):
            mask = _entry_mask(draws[rng.generator(draw_seed, img_id).integers(len(draws))], spec, H, W)
            if mask is not None:
                out[b] = x[b] * mask[0]
        return out
    if kind == "admix" and spec.pool is None:
        raise ConfigError("admix needs a reference image pool (TransformSpec.with_pool)")
    if kind == "ensemble":
        weights = np.asarray(spec.weights, dtype=float)
        choice = np.array([rng.generator(draw_seed, img_id, 0xE5).choice(len(weights), p=weights)
                           for img_id in image_ids], dtype=np.int64)
        out = np.empty_like(x)
        for m, member in enumerate(spec.members):
            sel = np.flatnonzero(choice == m)
            if len(sel):
                out[sel] = apply_array(member, x[sel], draw_seed, index, image_ids[sel])
        return out

    out = np.empty_like(x)
    for b, img_id in enumerate(image_ids):
        gen = rng.generator(draw_seed, img_id)
        img = x[b]
        if kind == "gaussian_noise":
            img = img + gen.normal(0.0, p["sigma"], size=img.shape).astype(x.dtype)
        elif kind == "resize_pad":
            if gen.random() < p["p"]:
                r = int(gen.integers(math.ceil(p["rmin"] * H), H + 1))
                top, left = gen.integers(0, H - r + 1), gen.integers(0, W - r + 1)
                canvas = np.zeros_like(img)
                canvas[:, top:top + r, left:left + r] = _resize_nearest(img, r)
                img = canvas
        elif kind == "translate":
            dy, dx = (int(v) for v in gen.integers(-p["t"], p["t"] + 1, size=2))
            img = _shift(img, dy, dx)
        elif kind == "scale":
            img = img / x.dtype.type(2.0 ** int(gen.integers(0, p["m"] + 1)))
        elif kind == "admix":
            ref = spec.pool[gen.integers(len(spec.pool))].astype(x.dtype)
            img = img + x.dtype.type(p["gamma"]) * ref
        elif kind == "path_mix":
            img = img * x.dtype.type(int(gen.integers(1, p["m"] + 1)) / p["m"])
        out[b] = img
    return np.clip(out, 0.0, 1.0)


def apply(spec, x, draw_seed, index=0, image_ids=None):
    """One draw of ``spec`` applied to every image of the batch.

    ``index`` selects the block in enumerate-mode maskblock; ``image_ids``
    (default ``0..B-1``) key the per-image random streams.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"transforms expect [B, C, H, W] input, got shape {arr.shape}")
    ids = np.arange(len(arr)) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    return Tensor(apply_array(spec, arr, draw_seed, index, ids))


def draw_batch(spec, x, N, base_seed, image_ids=None):
    if N < 1:
        raise ValueError("N must be at least 1")
    return [apply(spec, x, rng.derive(base_seed, i), i, image_ids) for i in range(N)]


def default_samples(spec, H, W):
    if spec.kind == "identity":
        return 1
    if spec.kind == "maskblock" and spec.params["sampling"] == "enumerate":
        return len(mask_draws(spec, H, W))
    if spec.kind == "ensemble":
        return max(default_samples(m, H, W) for m in spec.members)
    return RANDOM_DEFAULT_SAMPLES


def loss_preservation_curve(net, data, sizes, draws_per_image=8, seed=0, mode="grid", batch_size=500):
    """Mean NLL on randomly masked images for each patch size.

    Returns rows ``(s, masked_loss, clean_loss)``; ``s = 0`` means no mask,
    so its masked loss is the clean loss.
    """
    def mean_loss(images):
        total = 0.0
        for i in range(0, len(images), batch_size):
            lp = log_softmax(net(Tensor(images[i:i + batch_size], dtype=net.dtype)))
            total += float(nll_loss(lp, data.labels[i:i + batch_size]).data) * len(lp.data)
        return total / len(images)

    ids = np.arange(len(data))
    clean = mean_loss(data.images)
    rows = []
    for s in sizes:
        if s == 0:
            rows.append((0, clean, clean))
            continue
        spec = maskblock(int(s), mode=mode, include_identity=False, sampling="random")
        masked = np.mean([mean_loss(apply(spec, data.images, rng.derive(seed, s, d), d, ids).data)
                          for d in range(draws_per_image)])
        rows.append((int(s), float(masked), clean))
    return rows
