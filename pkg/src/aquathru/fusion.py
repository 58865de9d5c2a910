"""Texture-depth feature fusion with spatial and channel attention gates.

A toy-scale, numpy-only version of the fusion block: a channel gate
(shared two-layer MLP over channel mean and max pooling) and a spatial gate
(7 x 7 convolution over the channel-mean and channel-max maps) are
multiplied into a texture weight ``Q``, and the output is the convex blend
``Q * texture + (1 - Q) * depth``. The texture weight is the outer product
of the two gates; other readings (spatial-only, channel-only) are possible.

Feature tensors are plain (C, H, W) float arrays. Analytic gradients are
provided with respect to the weights only, which is what
:func:`gradient_check` compares against finite differences.

Weight blob layout (all little-endian)::

    bytes 0-3    magic b"TDFW"
    bytes 4-7    uint32 channels C
    bytes 8-11   uint32 reduction r
    bytes 12-15  uint32 kernel size k
    then float64 arrays, C order:
        kernel (2, k, k)   [channel-mean plane, channel-max plane]
        bias   (1,)
        w1     (C // r, C)
        b1     (C // r,)
        w2     (C, C // r)
        b2     (C,)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"TDFW"
_HEADER = struct.Struct("<4sIII")
_PARAM_NAMES = ("kernel", "bias", "w1", "b1", "w2", "b2")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def check_features(f, name: str = "features") -> np.ndarray:
    a = np.asarray(f, dtype=np.float64)
    if a.ndim != 3 or 0 in a.shape:
        raise ValueError(f"{name} must be a non-empty (C, H, W) array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


@dataclass(eq=False)
class FusionWeights:
    kernel: np.ndarray
    bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    reduction: int = 1

    def __post_init__(self):
        for name in _PARAM_NAMES:
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"fusion weight {name} must be finite")
            setattr(self, name, a)
        self.bias = self.bias.reshape(1)
        k = self.kernel.shape[-1]
        if self.kernel.shape != (2, k, k) or k % 2 == 0:
            raise ValueError(f"kernel must be (2, k, k) with odd k, got {self.kernel.shape}")
        c = self.b2.shape[0]
        if self.reduction < 1 or c % self.reduction:
            raise ValueError(f"reduction {self.reduction} must divide channel count {c}")
        h = c // self.reduction
        expect = {"w1": (h, c), "b1": (h,), "w2": (c, h), "b2": (c,)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")

    @property
    def channels(self) -> int:
        return self.b2.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[-1]

    @classmethod
    def init(cls, channels: int, reduction: int = 1, kernel_size: int = 7, seed: int = 0,
             scale: float = 0.1) -> "FusionWeights":
        """Seeded uniform initialisation in ``[-scale, scale]``."""
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channel count {channels}")
        rng = np.random.default_rng(seed)
        h = channels // reduction
        u = lambda *s: rng.uniform(-scale, scale, s)  # noqa: E731
        return cls(u(2, kernel_size, kernel_size), u(1), u(h, channels), u(h), u(channels, h),
                   u(channels), reduction)

    @classmethod
    def zeros(cls, channels: int, reduction: int = 1, kernel_size: int = 7) -> "FusionWeights":
        h = channels // reduction
        z = np.zeros
        return cls(z((2, kernel_size, kernel_size)), z(1), z((h, channels)), z(h), z((channels, h)),
                   z(channels), reduction)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in _PARAM_NAMES])

    def with_vector(self, v: np.ndarray) -> "FusionWeights":
        parts, i = {}, 0
        for n in _PARAM_NAMES:
            a = getattr(self, n)
            parts[n] = np.asarray(v[i : i + a.size], dtype=np.float64).reshape(a.shape)
            i += a.size
        return FusionWeights(reduction=self.reduction, **parts)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.channels, self.reduction, self.kernel_size)
        return head + self.to_vector().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FusionWeights":
        if len(buf) < _HEADER.size:
            raise ValueError("weight blob shorter than its 16-byte header")
        magic, c, r, k = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise ValueError(f"bad weight blob magic {magic!r}")
        if c == 0 or r == 0 or c % r or k % 2 == 0:
            raise ValueError(f"inconsistent weight blob header C={c} r={r} k={k}")
        template = cls.zeros(c, r, k)
        n = template.to_vector().size
        if len(buf) != _HEADER.size + 8 * n:
            raise ValueError(f"weight blob payload is {len(buf) - _HEADER.size} bytes, expected {8 * n}")
        return template.with_vector(np.frombuffer(buf, dtype="<f8", offset=_HEADER.size))


# ---------------------------------------------------------------------------
# spatial gate

def _pool_channels(f: np.ndarray) -> np.ndarray:
    return np.stack([f.mean(axis=0), f.max(axis=0)])


def _pad(p: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    return np.pad(p, ((0, 0), (r, r), (r, r)))


def spatial_logits(f, w: FusionWeights) -> np.ndarray:
    """Pre-sigmoid spatial map: zero-padded cross-correlation of the pooled maps."""
    f = check_features(f)
    k = w.kernel_size
    padded = _pad(_pool_channels(f), k)
    h, wd = f.shape[1:]
    out = np.full((h, wd), w.bias[0])
    for i in range(k):
        for j in range(k):
            out += np.tensordot(w.kernel[:, i, j], padded[:, i : i + h, j : j + wd], axes=1)
    return out


def spatial_attention(f, w: FusionWeights) -> np.ndarray:
    """(H, W) gate in (0, 1)."""
    return _sigmoid(spatial_logits(f, w))


def _spatial_backward(f: np.ndarray, w: FusionWeights, g_logits: np.ndarray) -> dict:
    k = w.kernel_size
    padded = _pad(_pool_channels(f), k)
    h, wd = f.shape[1:]
    dk = np.empty_like(w.kernel)
    for i in range(k):
        for j in range(k):
            dk[:, i, j] = np.tensordot(padded[:, i : i + h, j : j + wd], g_logits, axes=([1, 2], [0, 1]))
    return {"kernel": dk, "bias": np.array([g_logits.sum()])}


# ---------------------------------------------------------------------------
# channel gate

def _check_channels(f: np.ndarray, w: FusionWeights) -> None:
    if f.shape[0] != w.channels:
        raise ValueError(f"tensor has {f.shape[0]} channels, weights expect {w.channels}")


def _mlp(v: np.ndarray, w: FusionWeights):
    hidden_pre = w.w1 @ v + w.b1
    return w.w2 @ np.maximum(hidden_pre, 0.0) + w.b2, hidden_pre


def channel_logits(f, w: FusionWeights) -> np.ndarray:
    f = check_features(f)
    _check_channels(f, w)
    avg, _ = _mlp(f.mean(axis=(1, 2)), w)
    mx, _ = _mlp(f.max(axis=(1, 2)), w)
    return avg + mx


def channel_attention(f, w: FusionWeights) -> np.ndarray:
    """(C,) gate in (0, 1) from the shared MLP over mean and max pooling."""
    return _sigmoid(channel_logits(f, w))


def _mlp_backward(v: np.ndarray, w: FusionWeights, g: np.ndarray) -> dict:
    hidden_pre = w.w1 @ v + w.b1
    hidden = np.maximum(hidden_pre, 0.0)
    dh = (w.w2.T @ g) * (hidden_pre > 0)
    return {"w1": np.outer(dh, v), "b1": dh, "w2": np.outer(g, hidden), "b2": g.copy()}


def channel_branch_gradients(f, w: FusionWeights, g_logits: np.ndarray | None = None):
    """Weight gradients of the mean-pool and max-pool MLP branches, separately.

    ``g_logits`` is the upstream gradient on the channel logits (ones when
    omitted). The two dicts sum to the full MLP gradient.
    """
    f = check_features(f)
    _check_channels(f, w)
    g = np.ones(w.channels) if g_logits is None else np.asarray(g_logits, dtype=np.float64)
    return _mlp_backward(f.mean(axis=(1, 2)), w, g), _mlp_backward(f.max(axis=(1, 2)), w, g)


# ---------------------------------------------------------------------------
# fusion

def texture_weight(texture, w: FusionWeights) -> np.ndarray:
    """Texture weight ``Q[c, h, w] = channel_gate[c] * spatial_gate[h, w]``."""
    t = check_features(texture, "texture")
    return channel_attention(t, w)[:, None, None] * spatial_attention(t, w)[None]


def fuse(texture, depth_feat, w: FusionWeights) -> np.ndarray:
    """Blend ``Q * texture + (1 - Q) * depth_feat`` with the texture weight ``Q``."""
    t = check_features(texture, "texture")
    d = check_features(depth_feat, "depth_feat")
    if t.shape != d.shape:
        raise ValueError(f"texture {t.shape} and depth features {d.shape} differ in shape")
    q = texture_weight(t, w)
    return d + q * (t - d)


def _zero_grads(w: FusionWeights) -> dict:
    return {n: np.zeros_like(getattr(w, n)) for n in _PARAM_NAMES}


def weight_gradients(op: str, w: FusionWeights, texture, depth_feat=None, upstream=None) -> dict:
    """Gradient of ``sum(upstream * op(...))`` with respect to every weight.

    ``op`` is one of ``spatial_logits``, ``spatial_attention``,
    ``channel_logits``, ``channel_attention`` or ``fuse``. ``upstream``
    defaults to ones, i.e. the plain sum of the outputs.
    """
    t = check_features(texture, "texture")
    grads = _zero_grads(w)
    if op in ("spatial_logits", "spatial_attention"):
        g = np.ones(t.shape[1:]) if upstream is None else upstream
        if op == "spatial_attention":
            s = spatial_attention(t, w)
            g = g * s * (1.0 - s)
        grads.update(_spatial_backward(t, w, g))
        return grads
    if op in ("channel_logits", "channel_attention"):
        _check_channels(t, w)
        g = np.ones(w.channels) if upstream is None else upstream
        if op == "channel_attention":
            a = channel_attention(t, w)
            g = g * a * (1.0 - a)
        for part in channel_branch_gradients(t, w, g):
            for n, v in part.items():
                grads[n] += v
        return grads
    if op == "fuse":
        d = check_features(depth_feat, "depth_feat")
        if d.shape != t.shape:
            raise ValueError("texture and depth features differ in shape")
        g_out = np.ones(t.shape) if upstream is None else upstream
        g_q = g_out * (t - d)
        ca = channel_attention(t, w)
        sa = spatial_attention(t, w)
        g_ca = np.tensordot(g_q, sa, axes=([1, 2], [0, 1]))
        g_sa = np.tensordot(ca, g_q, axes=1)
        sub = weight_gradients("channel_attention", w, t, upstream=g_ca)
        for n in ("w1", "b1", "w2", "b2"):
            grads[n] = sub[n]
        sub = weight_gradients("spatial_attention", w, t, upstream=g_sa)
        grads["kernel"], grads["bias"] = sub["kernel"], sub["bias"]
        return grads
    raise ValueError(f"unknown fusion op {op!r}")


_OPS = {
    "spatial_logits": lambda t, d, w: spatial_logits(t, w),
    "spatial_attention": lambda t, d, w: spatial_attention(t, w),
    "channel_logits": lambda t, d, w: channel_logits(t, w),
    "channel_attention": lambda t, d, w: channel_attention(t, w),
    "fuse": lambda t, d, w: fuse(t, d, w),
}
for _name, _fn in (("spatial_attention", spatial_attention), ("channel_attention", channel_attention),
                   ("fuse", fuse), ("spatial_logits", spatial_logits), ("channel_logits", channel_logits)):
    _fn.op_name = _name


@dataclass
class Probe:
    texture: np.ndarray
    depth: np.ndarray
    weights: FusionWeights

    @classmethod
    def random(cls, channels=2, height=4, width=4, reduction=1, kernel_size=7, seed=0,
               weight_scale=0.5) -> "Probe":
        rng = np.random.default_rng(seed)
        t = rng.normal(size=(channels, height, width))
        d = rng.normal(size=(channels, height, width))
        w = FusionWeights.init(channels, reduction, kernel_size, seed=seed + 1, scale=weight_scale)
        return cls(t, d, w)


def gradient_check(op, probe: Probe, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference weight gradients.

    The loss is the sum of the op's outputs. Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; ``floor``
    keeps exactly-zero gradients from dividing by roundoff.
    """
    name = getattr(op, "op_name", op)
    if name not in _OPS:
        raise ValueError(f"unknown fusion op {op!r}")
    c, hh, ww = probe.texture.shape
    if c > 4 or hh > 8 or ww > 8:
        raise ValueError(f"probe {probe.texture.shape} exceeds the 4 x 8 x 8 limit")
    fn = _OPS[name]
    w = probe.weights
    grads = weight_gradients(name, w, probe.texture, probe.depth)
    analytic = np.concatenate([grads[n].ravel() for n in _PARAM_NAMES])

    theta = w.to_vector()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        f_up = float(np.sum(fn(probe.texture, probe.depth, w.with_vector(up))))
        f_down = float(np.sum(fn(probe.texture, probe.depth, w.with_vector(down))))
        numeric[i] = (f_up - f_down) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
