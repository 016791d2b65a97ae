"""Learnable components: the OA layer, RoI pooling, the residual transforms,
the discriminators and the relationship classifier."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .boxes import Box
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class ModelConfig:
    channels: int = 8
    oa_channels: int | None = None  # None -> same as channels
    pool: int = 4
    num_relations: int = 8
    mlp_hidden: int = 256
    disc_hidden: int = 256
    transform_blocks: int = 2
    residual: bool = True
    use_oa: bool = True
    paired_discriminator: bool = False

    @property
    def out_channels(self):
        return self.oa_channels or self.channels

    @property
    def feature_dim(self):
        c = self.out_channels if self.use_oa else self.channels
        return self.pool * self.pool * c

    def validate(self):
        for name in ("channels", "pool", "num_relations", "mlp_hidden", "disc_hidden", "transform_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.num_relations < 2:
            raise ConfigError("num_relations", "need at least 2 relations")
        if self.oa_channels is not None and self.oa_channels < 1:
            raise ConfigError("oa_channels", "must be >= 1")
        if not self.use_oa and self.oa_channels not in (None, self.channels):
            raise ConfigError("oa_channels", "bypassing the OA layer requires oa_channels == channels")
        return self

    def to_dict(self):
        return asdict(self)


class Linear:
    def __init__(self, fan_in, fan_out, rng, zero=False, bias=True):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear layer expects width {self.weight.shape[0]}, got {x.shape[-1]}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def named_parameters(self, prefix):
        out = [(prefix + "weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out


class OALayer:
    """1x1 convolution followed by leaky-relu (the object-agnostic layer)."""

    def __init__(self, c_in, c_out, rng):
        self.proj = Linear(c_in, c_out, rng)

    def __call__(self, fmap):
        return oa_forward(fmap, self)

    def named_parameters(self, prefix="phi."):
        return self.proj.named_parameters(prefix)


def check_feature_map(fmap):
    data = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap)
    if data.ndim != 3 or min(data.shape) < 1:
        raise ShapeError(f"feature map must be HxWxC with positive sizes, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ShapeError("feature map holds non-finite values")
    return fmap


def oa_forward(fmap, phi):
    fmap = T.as_tensor(check_feature_map(fmap))
    h, w, c = fmap.shape
    if c != phi.proj.weight.shape[0]:
        raise ShapeError(f"OA layer expects {phi.proj.weight.shape[0]} channels, map has {c}")
    flat = T.reshape(fmap, (h * w, c))
    out = T.leaky_relu(phi.proj(flat))
    return T.reshape(out, (h, w, out.shape[1]))


def _bin_spans(lo, hi, pool, limit):
    """Per-bin [start, end) cell spans for arrays of box edges; shape (n, pool)."""
    step = (hi - lo) / pool
    i = np.arange(pool, dtype=np.float64)
    a = np.floor(lo[:, None] + i * step[:, None]).astype(np.int64)
    b = np.ceil(lo[:, None] + (i + 1) * step[:, None]).astype(np.int64)
    a = np.clip(a, 0, limit - 1)
    b = np.minimum(np.maximum(b, a + 1), limit)
    return a, b


def roi_pool_index(data, boxes, pool):
    """Flat indices of the max cell of every (box, bin, channel).

    Ties go to the first cell of the bin in row-major order.
    """
    h, w, c = data.shape
    n = len(boxes)
    if n == 0:
        return np.zeros((0, pool * pool * c), dtype=np.int64)
    arr = np.array([tuple(Box(*b).validate(w, h)) for b in boxes], dtype=np.float64)
    r0, r1 = _bin_spans(arr[:, 1], arr[:, 3], pool, h)
    c0, c1 = _bin_spans(arr[:, 0], arr[:, 2], pool, w)
    mh, mw = int((r1 - r0).max()), int((c1 - c0).max())
    rr = r0[:, :, None] + np.arange(mh)           # (n, P, mh)
    cc = c0[:, :, None] + np.arange(mw)           # (n, P, mw)
    ok = (rr < r1[:, :, None])[:, :, None, :, None] & (cc < c1[:, :, None])[:, None, :, None, :]
    R = np.broadcast_to(np.minimum(rr, h - 1)[:, :, None, :, None], ok.shape)
    C = np.broadcast_to(np.minimum(cc, w - 1)[:, None, :, None, :], ok.shape)
    vals = data[R, C]                              # (n, P, P, mh, mw, c)
    vals = np.where(ok[..., None], vals, -np.inf).reshape(n, pool, pool, mh * mw, c)
    am = vals.argmax(axis=3)                       # (n, P, P, c)
    cell = (R * w + C).reshape(n, pool, pool, mh * mw)
    best = np.take_along_axis(cell, am, axis=3)
    return (best * c + np.arange(c)).reshape(n, -1)


def roi_pool(fmap, boxes, pool):
    """Max-pool each box into a pool x pool grid; returns (n, pool*pool*C)."""
    fmap = T.as_tensor(check_feature_map(fmap))
    idx = roi_pool_index(fmap.data, boxes, pool)
    flat = fmap.data.reshape(-1)

    def back(g):
        out = np.zeros(flat.size)
        np.add.at(out, idx.reshape(-1), g.reshape(-1))
        return (out.reshape(fmap.shape),)

    return T.make_op(flat[idx], (fmap,), back, "roi_pool")


class ResidualTransform:
    """Stack of x + L2(lrelu(L1(x))) blocks; L2 starts at zero."""

    def __init__(self, dim, rng, blocks=2):
        self.dim = dim
        self.blocks = [(Linear(dim, dim, rng), Linear(dim, dim, rng, zero=True)) for _ in range(blocks)]

    def __call__(self, x):
        return transform_forward(x, self)

    def forward(self, x):
        for l1, l2 in self.blocks:
            x = x + l2(T.leaky_relu(l1(x)))
        return x

    def named_parameters(self, prefix):
        out = []
        for k, (l1, l2) in enumerate(self.blocks):
            out += l1.named_parameters(f"{prefix}block{k}.l1.")
            out += l2.named_parameters(f"{prefix}block{k}.l2.")
        return out


class PlainTransform:
    """Two-layer MLP without a shortcut (the no-residual ablation)."""

    def __init__(self, dim, rng, hidden=None):
        self.dim = dim
        self.l1 = Linear(dim, hidden or dim, rng)
        self.l2 = Linear(hidden or dim, dim, rng)

    def __call__(self, x):
        return transform_forward(x, self)

    def forward(self, x):
        return self.l2(T.leaky_relu(self.l1(x)))

    def named_parameters(self, prefix):
        return self.l1.named_parameters(prefix + "l1.") + self.l2.named_parameters(prefix + "l2.")


def transform_forward(x, transform):
    x = T.as_tensor(x)
    if x.shape[-1] != transform.dim:
        raise ShapeError(f"transform expects dimension {transform.dim}, got {x.shape[-1]}")
    return transform.forward(x)


class Discriminator:
    def __init__(self, dim, hidden, rng):
        self.dim = dim
        self.l1 = Linear(dim, hidden, rng)
        self.l2 = Linear(hidden, 1, rng)

    def __call__(self, x):
        return discriminator_forward(x, self)

    def named_parameters(self, prefix):
        return self.l1.named_parameters(prefix + "l1.") + self.l2.named_parameters(prefix + "l2.")


def discriminator_forward(x, disc):
    """Probability that each row of ``x`` is a native domain sample; shape (n,)."""
    x = T.as_tensor(x)
    if x.data.ndim == 1:
        x = T.reshape(x, (1, -1))
    if x.shape[-1] != disc.dim:
        raise ShapeError(f"discriminator expects dimension {disc.dim}, got {x.shape[-1]}")
    logit = disc.l2(T.leaky_relu(disc.l1(x)))
    return T.reshape(T.sigmoid(logit), (x.shape[0],))


class RelationClassifier:
    """softmax_t(w_t . MLP([x_subject, x_object]))"""

    def __init__(self, dim, hidden, num_relations, rng):
        self.dim = dim
        self.l1 = Linear(2 * dim, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.w = Linear(hidden, num_relations, rng, bias=False)

    def named_parameters(self, prefix="theta."):
        return (self.l1.named_parameters(prefix + "mlp1.") + self.l2.named_parameters(prefix + "mlp2.")
                + self.w.named_parameters(prefix + "w."))


def relation_scores(x_i, x_j, theta):
    """Score matrix (n, R) for subject rows ``x_i`` and object rows ``x_j``."""
    x_i, x_j = T.as_tensor(x_i), T.as_tensor(x_j)
    if x_i.data.ndim == 1:
        x_i, x_j = T.reshape(x_i, (1, -1)), T.reshape(x_j, (1, -1))
    if x_i.shape != x_j.shape or x_i.shape[-1] != theta.dim:
        raise ShapeError(f"relation scores need two (n, {theta.dim}) inputs, got {x_i.shape} and {x_j.shape}")
    h = T.leaky_relu(theta.l1(T.concat([x_i, x_j], axis=-1)))
    h = T.leaky_relu(theta.l2(h))
    return T.softmax(theta.w(h))


class ModelBundle:
    def __init__(self, config, phi, F, G, D_A, D_B, theta):
        self.config = config
        self.phi, self.F, self.G, self.D_A, self.D_B, self.theta = phi, F, G, D_A, D_B, theta

    def feature_map(self, base):
        """OA map of a base map, or the base map itself when the OA layer is bypassed."""
        if self.config.use_oa:
            return oa_forward(base, self.phi)
        return T.as_tensor(check_feature_map(base))

    def roi_features(self, fmap, boxes):
        return roi_pool(fmap, boxes, self.config.pool)

    def scores(self, base, pairs):
        """Relation scores for (subject box, object box) pairs of one scene."""
        fmap = self.feature_map(base)
        subj = self.roi_features(fmap, [p[0] for p in pairs])
        obj = self.roi_features(fmap, [p[1] for p in pairs])
        return relation_scores(subj, obj, self.theta)

    def groups(self):
        return {
            "phi": self.phi.named_parameters("phi."),
            "F": self.F.named_parameters("F."),
            "G": self.G.named_parameters("G."),
            "D_A": self.D_A.named_parameters("D_A."),
            "D_B": self.D_B.named_parameters("D_B."),
            "theta": self.theta.named_parameters("theta."),
        }

    def named_parameters(self):
        out = []
        for group in self.groups().values():
            out += group
        return out

    def params(self, *names):
        return [p for name in names for _, p in self.groups()[name]]

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_arrays(self, arrays):
        own = dict(self.named_parameters())
        if set(own) != set(arrays):
            missing = sorted(set(own) ^ set(arrays))
            raise ShapeError(f"parameter names differ: {missing[:5]}")
        for name, p in own.items():
            if np.shape(arrays[name]) != p.data.shape:
                raise ShapeError(f"{name}: shape {np.shape(arrays[name])} != {p.data.shape}")
            p.data[...] = arrays[name]

    def copy(self):
        twin = init_params(self.config, 0)
        twin.load_arrays(self.state_arrays())
        return twin


def init_params(config, seed):
    """Deterministic bundle from (config, seed).

    Each component draws from its own stream, so variants that differ only in
    flags (OA bypass, plain transforms) share identical weights elsewhere.
    """
    config.validate()

    def rng(k):
        return np.random.default_rng([seed, k])

    c, p = config.channels, config.pool
    phi = OALayer(c, config.out_channels, rng(0))
    d = p * p * (config.out_channels if config.use_oa else c)
    if config.residual:
        F = ResidualTransform(d, rng(1), config.transform_blocks)
        G = ResidualTransform(d, rng(2), config.transform_blocks)
    else:
        F = PlainTransform(d, rng(1))
        G = PlainTransform(d, rng(2))
    d_in = 2 * d if config.paired_discriminator else d
    D_A = Discriminator(d_in, config.disc_hidden, rng(3))
    D_B = Discriminator(d_in, config.disc_hidden, rng(4))
    theta = RelationClassifier(d, config.mlp_hidden, config.num_relations, rng(5))
    return ModelBundle(config, phi, F, G, D_A, D_B, theta)
