"""HRAN network: spatial/channel attention blocks, residual groups, feature
fusion and the sub-pixel reconstruction head, with manual backpropagation.

Each block has a ``_*_fwd`` function returning ``(output, cache)`` and a
matching ``_*_bwd`` that consumes the cache, accumulates parameter gradients
into the :class:`ParamStore` and returns the gradient w.r.t. the block input.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import CacheError, ConfigError, ShapeError
from .rng import Rng
from .tensor import ConvSpec

FUSION_MODES = ("bff", "hff")


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 4
    channels: int = 64
    rg_count: int = 4
    hrab_per_rg: int = 8
    dilations: tuple[int, int] = (1, 2)
    ca_reduction: int = 4
    leaky_slope: float = 0.2
    fusion_mode: str = "bff"
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.scale < 1:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        for key in ("channels", "rg_count", "hrab_per_rg", "ca_reduction", "in_channels", "out_channels"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.channels % self.ca_reduction:
            raise ConfigError(
                f"channels ({self.channels}) must be divisible by ca_reduction ({self.ca_reduction})"
            )
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.fusion_mode == "bff" and self.rg_count & (self.rg_count - 1):
            raise ConfigError(f"bff fusion needs a power-of-two rg_count, got {self.rg_count}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if len(self.dilations) != 2 or min(self.dilations) < 1:
            raise ConfigError(f"dilations must be two positive integers, got {self.dilations}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """The desk-scale configuration used by the gradient and training checks."""
        base = dict(scale=2, channels=4, rg_count=2, hrab_per_rg=1, ca_reduction=2)
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def layer_specs(cfg: ModelConfig) -> "OrderedDict[str, ConvSpec]":
    """Every convolution of the network by layer name, in construction order."""
    C = cfg.channels
    d1, d2 = cfg.dilations
    layers: OrderedDict[str, ConvSpec] = OrderedDict()

    def conv(name, cin, cout, k=3, d=1):
        layers[name] = ConvSpec(cin, cout, (k, k), d)

    conv("head.sf1", cfg.in_channels, C)
    conv("head.sf2", C, C)
    for i in range(cfg.rg_count):
        for j in range(cfg.hrab_per_rg):
            p = f"rg.{i}.hrab.{j}"
            conv(f"{p}.sa.stage1.d1", C, C, d=d1)
            conv(f"{p}.sa.stage1.d2", C, C, d=d2)
            conv(f"{p}.sa.stage2.d1", 2 * C, C, d=d1)
            conv(f"{p}.sa.stage2.d2", 2 * C, C, d=d2)
            conv(f"{p}.sa.fuse", 2 * C, C, k=1)
            conv(f"{p}.ca.down", C, C // cfg.ca_reduction, k=1)
            conv(f"{p}.ca.up", C // cfg.ca_reduction, C, k=1)
        conv(f"rg.{i}.conv", C, C)
    if cfg.fusion_mode == "bff":
        for k in range(cfg.rg_count - 1):
            conv(f"fusion.merge.{k}", 2 * C, C, k=1)
    else:
        conv("fusion.merge.0", cfg.rg_count * C, C, k=1)
    conv("fusion.out", C, C, k=1)
    conv("recon.up", C, C * cfg.scale**2)
    conv("recon.out", C, cfg.out_channels)
    return layers


def param_count(cfg: ModelConfig) -> int:
    return sum(spec.num_params for spec in layer_specs(cfg).values())


def param_breakdown(cfg: ModelConfig) -> "OrderedDict[str, int]":
    """Parameter counts grouped by top-level block (head, rg.i, fusion, recon)."""
    out: OrderedDict[str, int] = OrderedDict()
    for name, spec in layer_specs(cfg).items():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "rg" else parts[0]
        out[key] = out.get(key, 0) + spec.num_params
    return out


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def of(cls, value: np.ndarray) -> "Param":
        return cls(value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value))


class ParamStore:
    """Ordered named parameters with gradient accumulators and Adam moments.

    ``version`` increases on every in-place value update; forward caches
    remember the version they were built against.
    """

    def __init__(self):
        self._params: OrderedDict[str, Param] = OrderedDict()
        self.version = 0

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Param.of(np.ascontiguousarray(value))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"parameter store has no parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def value(self, name: str) -> np.ndarray:
        return self[name].value

    @property
    def dtype(self):
        first = next(iter(self._params.values()), None)
        return T.DEFAULT_DTYPE if first is None else first.value.dtype

    def num_elements(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def mark_updated(self) -> None:
        self.version += 1

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with values (and moments) cast to ``dtype``; gradients reset."""
        out = ParamStore()
        for name, p in self._params.items():
            q = out.add(name, p.value.astype(dtype))
            q.m[...] = p.m
            q.v[...] = p.v
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> ParamStore:
    """Kaiming-normal weights (gain for LeakyReLU), zero biases, SplitMix64-seeded."""
    rng = Rng(seed)
    store = ParamStore()
    for name, spec in layer_specs(cfg).items():
        o, i, kh, kw = spec.weight_shape
        std = np.sqrt(2.0 / ((1.0 + cfg.leaky_slope**2) * i * kh * kw))
        w = (rng.normal(o * i * kh * kw) * std).reshape(spec.weight_shape)
        store.add(f"{name}.weight", w.astype(dtype))
        store.add(f"{name}.bias", np.zeros(o, dtype))
    return store


def check_store(cfg: ModelConfig, store: ParamStore) -> None:
    """Raise ConfigError unless ``store`` holds exactly the parameters ``cfg`` needs."""
    expected = set()
    for name, spec in layer_specs(cfg).items():
        for suffix, shape in ((".weight", spec.weight_shape), (".bias", (spec.out_channels,))):
            key = name + suffix
            expected.add(key)
            if key not in store:
                raise ConfigError(f"parameter store is missing {key!r}")
            if store.value(key).shape != shape:
                raise ConfigError(
                    f"parameter {key!r} has shape {store.value(key).shape}, config expects {shape}"
                )
    extra = [k for k in store if k not in expected]
    if extra:
        raise ConfigError(f"parameter store has unexpected parameters: {extra[:5]}")


# -- convolution layer helpers ------------------------------------------------


def _conv(store, layer, x, dilation=1):
    return T.conv2d(x, store.value(layer + ".weight"), store.value(layer + ".bias"), dilation)


def _conv_bwd(store, layer, x, g, dilation=1):
    w = store[layer + ".weight"]
    b = store[layer + ".bias"]
    gx, gw, gb = T.conv2d_vjp(x, w.value, g, dilation)
    w.grad += gw
    b.grad += gb
    return gx


def _check_channels(f, cfg, what):
    T.check4(f, what)
    if f.shape[1] != cfg.channels:
        raise ShapeError(f"{what}: expected {cfg.channels} channels, got {f.shape[1]}")


# -- channel attention ----------------------------------------------------------


def _ca_fwd(f, store, prefix, cfg):
    z = T.global_avg_pool(f)
    a1 = _conv(store, f"{prefix}.down", z)
    h = T.leaky_relu(a1, cfg.leaky_slope)
    a2 = _conv(store, f"{prefix}.up", h)
    gate = T.sigmoid(a2)
    return gate, (f.shape, z, a1, h, gate)


def _ca_bwd(g, cache, store, prefix, cfg):
    shape, z, a1, h, gate = cache
    ga2 = T.sigmoid_vjp(gate, g)
    gh = _conv_bwd(store, f"{prefix}.up", h, ga2)
    ga1 = T.leaky_relu_vjp(a1, gh, cfg.leaky_slope)
    gz = _conv_bwd(store, f"{prefix}.down", z, ga1)
    return T.global_avg_pool_vjp(shape, gz)


def channel_attention_forward(f, store, prefix, cfg):
    """Per-channel gate ``sigmoid(up(lrelu(down(gap(f)))))`` of shape ``(n, C, 1, 1)``."""
    _check_channels(f, cfg, "channel attention input")
    return _ca_fwd(f, store, prefix, cfg)[0]


# -- spatial attention -----------------------------------------------------------


def _sa_fwd(f, store, prefix, cfg):
    d1, d2 = cfg.dilations
    a = cfg.leaky_slope
    u1 = _conv(store, f"{prefix}.stage1.d1", f, d1)
    s1 = T.leaky_relu(u1, a)
    u2 = T.add(_conv(store, f"{prefix}.stage1.d2", f, d2), s1)
    s2 = T.leaky_relu(u2, a)
    s = T.concat_channels([s1, s2])
    t1 = _conv(store, f"{prefix}.stage2.d1", s, d1)
    q1 = T.leaky_relu(t1, a)
    t2 = T.add(_conv(store, f"{prefix}.stage2.d2", s, d2), q1)
    q2 = T.leaky_relu(t2, a)
    q = T.concat_channels([q1, q2])
    out = _conv(store, f"{prefix}.fuse", q)
    return out, (f, u1, u2, s, t1, t2, q)


def _sa_bwd(g, cache, store, prefix, cfg):
    f, u1, u2, s, t1, t2, q = cache
    d1, d2 = cfg.dilations
    a = cfg.leaky_slope
    C = cfg.channels
    gq1, gq2 = T.concat_channels_vjp([C, C], _conv_bwd(store, f"{prefix}.fuse", q, g))
    gt2 = T.leaky_relu_vjp(t2, gq2, a)
    gs = _conv_bwd(store, f"{prefix}.stage2.d2", s, gt2, d2)
    gt1 = T.leaky_relu_vjp(t1, gq1 + gt2, a)
    gs = gs + _conv_bwd(store, f"{prefix}.stage2.d1", s, gt1, d1)
    gs1, gs2 = T.concat_channels_vjp([C, C], gs)
    gu2 = T.leaky_relu_vjp(u2, gs2, a)
    gf = _conv_bwd(store, f"{prefix}.stage1.d2", f, gu2, d2)
    gu1 = T.leaky_relu_vjp(u1, gs1 + gu2, a)
    return gf + _conv_bwd(store, f"{prefix}.stage1.d1", f, gu1, d1)


def spatial_attention_forward(f, store, prefix, cfg):
    _check_channels(f, cfg, "spatial attention input")
    return _sa_fwd(f, store, prefix, cfg)[0]


# -- HRAB (SA x CA plus identity) --------------------------------------------------------


def _hrab_fwd(f, store, prefix, cfg):
    sa, sa_cache = _sa_fwd(f, store, f"{prefix}.sa", cfg)
    gate, ca_cache = _ca_fwd(f, store, f"{prefix}.ca", cfg)
    out = T.add(T.mul_broadcast(sa, gate), f)
    return out, (sa, gate, sa_cache, ca_cache)


def _hrab_bwd(g, cache, store, prefix, cfg):
    sa, gate, sa_cache, ca_cache = cache
    gsa, ggate = T.mul_broadcast_vjp(sa, gate, g)
    gf = g + _sa_bwd(gsa, sa_cache, store, f"{prefix}.sa", cfg)
    return gf + _ca_bwd(ggate, ca_cache, store, f"{prefix}.ca", cfg)


def hrab_forward(f, store, prefix, cfg):
    """``SA(f) * CA(f) + f``."""
    _check_channels(f, cfg, "HRAB input")
    return _hrab_fwd(f, store, prefix, cfg)[0]


# -- residual group ------------------------------------------------------------------


def _rg_fwd(f, store, prefix, cfg):
    x = f
    caches = []
    for j in range(cfg.hrab_per_rg):
        x, c = _hrab_fwd(x, store, f"{prefix}.hrab.{j}", cfg)
        caches.append(c)
    out = T.add(_conv(store, f"{prefix}.conv", x), f)
    return out, (x, caches)


def _rg_bwd(g, cache, store, prefix, cfg):
    x, caches = cache
    gx = _conv_bwd(store, f"{prefix}.conv", x, g)
    for j in reversed(range(cfg.hrab_per_rg)):
        gx = _hrab_bwd(gx, caches[j], store, f"{prefix}.hrab.{j}", cfg)
    return gx + g


def residual_group_forward(f, store, prefix, cfg):
    _check_channels(f, cfg, "residual group input")
    return _rg_fwd(f, store, prefix, cfg)[0]


# -- feature fusion --------------------------------------------------------------------


def _bff_fwd(feats, store, cfg):
    # nodes: leaves 0..R-1, then merge k creates node R + k
    level = list(enumerate(feats))
    steps = []
    k = 0
    while len(level) > 1:
        nxt = []
        for (ia, a), (ib, b) in zip(level[0::2], level[1::2]):
            cat = T.concat_channels([a, b])
            nxt.append((len(feats) + k, _conv(store, f"fusion.merge.{k}", cat)))
            steps.append((k, ia, ib, cat))
            k += 1
        level = nxt
    top_id, top = level[0]
    out = _conv(store, "fusion.out", top)
    return out, (len(feats), steps, top_id, top)


def _bff_bwd(g, cache, store, cfg):
    count, steps, top_id, top = cache
    grads = [None] * (count + len(steps))
    grads[top_id] = _conv_bwd(store, "fusion.out", top, g)
    for k, ia, ib, cat in reversed(steps):
        gcat = _conv_bwd(store, f"fusion.merge.{k}", cat, grads[count + k])
        grads[ia], grads[ib] = T.concat_channels_vjp([cfg.channels] * 2, gcat)
    return grads[:count]


def _hff_fwd(feats, store, cfg):
    cat = T.concat_channels(feats)
    m = _conv(store, "fusion.merge.0", cat)
    out = _conv(store, "fusion.out", m)
    return out, (len(feats), cat, m)


def _hff_bwd(g, cache, store, cfg):
    count, cat, m = cache
    gm = _conv_bwd(store, "fusion.out", m, g)
    gcat = _conv_bwd(store, "fusion.merge.0", cat, gm)
    return T.concat_channels_vjp([cfg.channels] * count, gcat)


def _check_feats(feats, cfg):
    if len(feats) != cfg.rg_count:
        raise ShapeError(f"fusion expects {cfg.rg_count} group outputs, got {len(feats)}")
    for f in feats:
        _check_channels(f, cfg, "fusion input")


def bff_forward(feats, store, cfg):
    """Pairwise concat + 1x1 merge tree over the group outputs, then a final 1x1."""
    _check_feats(feats, cfg)
    return _bff_fwd(feats, store, cfg)[0]


def hff_forward(feats, store, cfg):
    """Single concat of every group output, 1x1 reduce, then a final 1x1."""
    _check_feats(feats, cfg)
    return _hff_fwd(feats, store, cfg)[0]


# -- reconstruction ----------------------------------------------------------------------


def _rec_fwd(f, store, cfg):
    u = _conv(store, "recon.up", f)
    ps = T.pixel_shuffle(u, cfg.scale)
    out = _conv(store, "recon.out", ps)
    return out, (f, ps)


def _rec_bwd(g, cache, store, cfg):
    f, ps = cache
    gps = _conv_bwd(store, "recon.out", ps, g)
    gu = T.pixel_shuffle_vjp(gps, cfg.scale)
    return _conv_bwd(store, "recon.up", f, gu)


def reconstruct(f, store, cfg):
    """conv3x3 (C -> C*s^2), pixel shuffle by s, conv3x3 (C -> 3)."""
    _check_channels(f, cfg, "reconstruction input")
    return _rec_fwd(f, store, cfg)[0]


# -- full network ------------------------------------------------------------------------


@dataclass
class ForwardCache:
    version: int
    input_shape: tuple
    data: tuple = field(repr=False)
    consumed: bool = False


def _hran_fwd(x, store, cfg):
    T.check4(x, "HRAN input")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"HRAN input: expected {cfg.in_channels} channels, got {x.shape[1]}")
    if min(x.shape) < 1:
        raise ShapeError(f"HRAN input: dimensions must be positive, got {x.shape}")
    x = x.astype(store.dtype, copy=False)
    f0 = _conv(store, "head.sf1", x)
    f1 = _conv(store, "head.sf2", f0)
    feats, rg_caches = [], []
    h = f1
    for i in range(cfg.rg_count):
        h, c = _rg_fwd(h, store, f"rg.{i}", cfg)
        feats.append(h)
        rg_caches.append(c)
    fuse = _bff_fwd if cfg.fusion_mode == "bff" else _hff_fwd
    fused, fcache = fuse(feats, store, cfg)
    fdf = T.add(fused, f0)
    out, rcache = _rec_fwd(fdf, store, cfg)
    return out, (x, f0, rg_caches, fcache, rcache)


def hran_forward(x, store, cfg, keep_cache=False):
    """Super-resolve ``x`` of shape ``(n, 3, h, w)`` to ``(n, 3, s*h, s*w)``.

    With ``keep_cache`` returns ``(output, ForwardCache)`` for :func:`hran_backward`.
    """
    out, data = _hran_fwd(x, store, cfg)
    if keep_cache:
        return out, ForwardCache(store.version, x.shape, data)
    return out


def hran_backward(upstream, cache: ForwardCache | None, store: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Accumulate ``d(sum(upstream * output)) / d(theta)`` into ``store`` grads.

    Returns the gradient w.r.t. the network input. A cache can be used once
    and only while the store is unchanged since the forward pass.
    """
    if cache is None:
        raise CacheError("backward called without a forward cache")
    if cache.consumed:
        raise CacheError("forward cache already consumed; run forward again before backward")
    if cache.version != store.version:
        raise CacheError("forward cache is stale: parameters changed since the forward pass")
    n, _, h, w = cache.input_shape
    expect = (n, cfg.out_channels, h * cfg.scale, w * cfg.scale)
    if upstream.shape != expect:
        raise ShapeError(f"hran_backward: upstream shape {upstream.shape} != output shape {expect}")
    cache.consumed = True
    x, f0, rg_caches, fcache, rcache = cache.data
    g = upstream.astype(store.dtype, copy=False)
    gfdf = _rec_bwd(g, rcache, store, cfg)
    fuse_bwd = _bff_bwd if cfg.fusion_mode == "bff" else _hff_bwd
    gfeats = fuse_bwd(gfdf, fcache, store, cfg)
    gh = np.zeros_like(gfeats[-1])
    for i in reversed(range(cfg.rg_count)):
        gh = _rg_bwd(gh + gfeats[i], rg_caches[i], store, f"rg.{i}", cfg)
    gf0 = _conv_bwd(store, "head.sf2", f0, gh) + gfdf
    return _conv_bwd(store, "head.sf1", x, gf0)


class HRAN:
    """Network bound to a config and parameter store.

    ``forward(x, keep_cache=True)`` followed by ``backward(upstream)`` is
    the training path; calling the model directly is cache-free inference.
    """

    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        self.store = init_params(cfg, seed, dtype) if store is None else store
        check_store(cfg, self.store)
        self._cache: ForwardCache | None = None

    def __call__(self, x):
        return hran_forward(x, self.store, self.cfg)

    def forward(self, x, keep_cache=True):
        if not keep_cache:
            self._cache = None
            return self(x)
        out, self._cache = hran_forward(x, self.store, self.cfg, keep_cache=True)
        return out

    def backward(self, upstream):
        cache, self._cache = self._cache, None
        if cache is None:
            raise CacheError("backward called without a retained forward pass")
        return hran_backward(upstream, cache, self.store, self.cfg)

    def num_params(self) -> int:
        return self.store.num_elements()
