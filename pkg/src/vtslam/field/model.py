"""Neural signed distance field: multiresolution hash encoding followed by a small MLP.

All parameters live in one flat float64 vector so the optimizer, serialization
and finite-difference checks can treat them uniformly. Forward and backward
passes are written out by hand.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..geometry.se3 import Pose
from . import kernels

PRIMES = (1, 2654435761, 805459861)
MAGIC = b"VTSF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 8
    features_per_level: int = 2
    table_size: int = 2**19
    base_resolution: int = 16
    growth_factor: float = 1.5
    mlp_layers: int = 3
    mlp_width: int = 64
    bound_side: float = 0.15
    bound_center: tuple = (0.0, 0.0, 0.0)
    truncation: float = 0.005
    softplus_beta: float = 100.0

    def __post_init__(self):
        if self.table_size <= 0 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.bound_side <= 0:
            raise ValueError("bound_side must be positive")
        if self.mlp_layers < 1:
            raise ValueError("need at least one MLP layer")
        object.__setattr__(self, "bound_center", tuple(float(x) for x in self.bound_center))

    def resolutions(self) -> list[int]:
        return [int(np.floor(self.base_resolution * self.growth_factor**l)) for l in range(self.levels)]

    def level_sizes(self) -> list[int]:
        # coarse levels whose dense grid fits in the table are indexed 1:1
        return [min(self.table_size, (r + 1) ** 3) for r in self.resolutions()]

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.levels * self.features_per_level] + [self.mlp_width] * (self.mlp_layers - 1) + [1]
        return [(dims[i + 1], dims[i]) for i in range(self.mlp_layers)]

    def table_param_count(self) -> int:
        return sum(self.level_sizes()) * self.features_per_level

    def param_count(self) -> int:
        return self.table_param_count() + sum(o * i + o for o, i in self.layer_shapes())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bound_center"] = list(self.bound_center)
        return d


@dataclass(eq=False)
class FieldParams:
    """Flat parameter vector plus views onto hash tables and MLP layers."""

    cfg: FieldConfig
    theta: np.ndarray
    tables: list = field(init=False, repr=False)
    weights: list = field(init=False, repr=False)
    biases: list = field(init=False, repr=False)

    def __post_init__(self):
        cfg = self.cfg
        if self.theta.shape != (cfg.param_count(),):
            raise ValueError(f"expected {cfg.param_count()} parameters, got {self.theta.shape}")
        F = cfg.features_per_level
        off = 0
        self.tables = []
        for n in cfg.level_sizes():
            self.tables.append(self.theta[off:off + n * F].reshape(n, F))
            off += n * F
        self.weights, self.biases = [], []
        for o, i in cfg.layer_shapes():
            self.weights.append(self.theta[off:off + o * i].reshape(o, i))
            off += o * i
            self.biases.append(self.theta[off:off + o])
            off += o

    def copy(self) -> "FieldParams":
        return FieldParams(self.cfg, self.theta.copy())


def init_params(cfg: FieldConfig, seed: int = 0) -> FieldParams:
    """Uniform hash features in [-1e-4, 1e-4], Kaiming-uniform MLP, output bias = truncation."""
    rng = np.random.default_rng(seed)
    theta = np.empty(cfg.param_count())
    p = FieldParams(cfg, theta)
    for t in p.tables:
        t[:] = rng.uniform(-1e-4, 1e-4, size=t.shape)
    for W, b in zip(p.weights, p.biases):
        bound = np.sqrt(6.0 / W.shape[1])
        W[:] = rng.uniform(-bound, bound, size=W.shape)
        b[:] = 0.0
    p.biases[-1][:] = cfg.truncation
    return p


# -- encoding ----------------------------------------------------------------

def normalize_points(cfg: FieldConfig, pts_obj: np.ndarray):
    u = (pts_obj - np.asarray(cfg.bound_center)) / cfg.bound_side + 0.5
    inside = np.all((u >= 0.0) & (u <= 1.0), axis=1)
    return u, inside


class _Cache:
    __slots__ = ("idx", "frac", "h", "pre", "act")  # pre holds activation slopes


def _layout(cfg: FieldConfig):
    sizes = np.array(cfg.level_sizes(), dtype=np.int64)
    res = np.array(cfg.resolutions(), dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]) * cfg.features_per_level
    dense = sizes == (res + 1) ** 3
    return offsets.astype(np.int64), sizes, res, dense


def _forward_inbound(params: FieldParams, u: np.ndarray, cache: _Cache | None = None):
    cfg = params.cfg
    offsets, sizes, res, dense = _layout(cfg)
    h, idx, frac = kernels.encode(np.ascontiguousarray(u), params.theta, offsets, sizes, res, dense,
                                  cfg.features_per_level)
    pre, act = [], [h]
    x = h
    beta = cfg.softplus_beta
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = x @ W.T + b
        if k < len(params.weights) - 1:
            if cache is None:
                x = kernels.softplus(z, beta)
                continue
            x, slope = kernels.softplus_sigmoid(z, beta)
            pre.append(slope)
            act.append(x)
        else:
            x = z
    if cache is not None:
        cache.idx, cache.frac, cache.h, cache.pre, cache.act = idx, frac, h, pre, act
    return x[:, 0]


def _bound_distance(cfg: FieldConfig, pts_obj: np.ndarray):
    """Distance from points to the bounding cube and its gradient (object frame)."""
    c = np.asarray(cfg.bound_center)
    q = np.abs(pts_obj - c) - cfg.bound_side / 2
    qp = np.maximum(q, 0.0)
    d = np.linalg.norm(qp, axis=1)
    g = np.sign(pts_obj - c) * qp / np.maximum(d, 1e-300)[:, None]
    return d, g


class NeuralField:
    """The posed field F(p) = mlp(encode(pose^-1 p)) with parameters ``params``."""

    def __init__(self, cfg: FieldConfig, params: FieldParams | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    # -- evaluation in the object frame ------------------------------------

    def eval_object(self, pts_obj: np.ndarray, chunk: int = 65536):
        """Signed distance for object-frame points; returns (values, in_bound mask)."""
        pts_obj = np.asarray(pts_obj, dtype=float).reshape(-1, 3)
        u, inside = normalize_points(self.cfg, pts_obj)
        out = np.empty(len(pts_obj))
        idx = np.flatnonzero(inside)
        for s in range(0, len(idx), chunk):
            sel = idx[s:s + chunk]
            out[sel] = _forward_inbound(self.params, u[sel])
        if not inside.all():
            d, _ = _bound_distance(self.cfg, pts_obj[~inside])
            out[~inside] = d + self.cfg.truncation
        return out, inside

    def eval(self, pose: Pose, pts_world: np.ndarray):
        return self.eval_object(pose.inverse().apply(pts_world))

    # -- gradients w.r.t. parameters ----------------------------------------

    def value_and_param_grad(self, pts_obj: np.ndarray, upstream_fn):
        """Forward pass, then reverse mode with upstream = upstream_fn(values).

        ``upstream_fn`` maps all values to dL/dF; out-of-bound entries are ignored.
        Returns (values, in_bound mask, gradient vector).
        """
        pts_obj = np.asarray(pts_obj, dtype=float).reshape(-1, 3)
        u, inside = normalize_points(self.cfg, pts_obj)
        vals = np.empty(len(pts_obj))
        if not inside.all():
            d, _ = _bound_distance(self.cfg, pts_obj[~inside])
            vals[~inside] = d + self.cfg.truncation
        cache = _Cache()
        vin = _forward_inbound(self.params, u[inside], cache)
        vals[inside] = vin
        upstream = np.asarray(upstream_fn(vals), dtype=float)
        grad = self._backward(cache, upstream[inside])
        return vals, inside, grad

    def backward_params(self, pose: Pose, pts_world: np.ndarray, upstream: np.ndarray):
        """Gradient of sum(upstream * F(pts)) w.r.t. the flat parameter vector.

        Out-of-bound points take the clamp branch and contribute nothing.
        """
        pts_obj = pose.inverse().apply(np.asarray(pts_world, dtype=float).reshape(-1, 3))
        u, inside = normalize_points(self.cfg, pts_obj)
        cache = _Cache()
        _forward_inbound(self.params, u[inside], cache)
        return self._backward(cache, np.asarray(upstream, dtype=float)[inside])

    def _backward(self, cache: _Cache, g: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        p = self.params
        grad = np.zeros_like(p.theta)
        gp = FieldParams(cfg, grad)
        beta = cfg.softplus_beta
        delta = g[:, None]  # dL/dz for the output layer
        n_layers = len(p.weights)
        for k in range(n_layers - 1, -1, -1):
            x = cache.act[k]
            gp.weights[k][:] = delta.T @ x
            gp.biases[k][:] = delta.sum(axis=0)
            dx = delta @ p.weights[k]
            if k > 0:
                delta = dx * cache.pre[k - 1]
        if len(g):
            kernels.scatter_grad(grad, cache.idx, cache.frac, np.ascontiguousarray(dx),
                                 cfg.features_per_level)
        return grad

    # -- gradients w.r.t. the query point ------------------------------------

    def gradient_object(self, pts_obj: np.ndarray):
        """dF/dp in the object frame. Returns (values, gradients, in_bound mask).

        Out-of-bound points get the gradient of the clamped distance-to-bound.
        """
        cfg = self.cfg
        pts_obj = np.asarray(pts_obj, dtype=float).reshape(-1, 3)
        u, inside = normalize_points(cfg, pts_obj)
        vals = np.empty(len(pts_obj))
        grads = np.empty((len(pts_obj), 3))
        if not inside.all():
            d, g = _bound_distance(cfg, pts_obj[~inside])
            vals[~inside] = d + cfg.truncation
            grads[~inside] = g
        if inside.any():
            cache = _Cache()
            vals[inside] = _forward_inbound(self.params, u[inside], cache)
            grads[inside] = self._input_grad(cache) / cfg.bound_side
        return vals, grads, inside

    def _input_grad(self, cache: _Cache) -> np.ndarray:
        cfg = self.cfg
        p = self.params
        beta = cfg.softplus_beta
        n = cache.h.shape[0]
        delta = np.broadcast_to(p.weights[-1], (n, p.weights[-1].shape[1]))
        for k in range(len(p.weights) - 1, 0, -1):
            delta = delta * cache.pre[k - 1]
            delta = delta @ p.weights[k - 1]
        _, _, res, _ = _layout(cfg)
        du = kernels.encode_input_grad(p.theta, cache.idx, cache.frac, res,
                                       np.ascontiguousarray(delta), cfg.features_per_level)
        return du

    def gradient(self, pose: Pose, pts_world: np.ndarray):
        """dF/dp_world for the posed field. Returns (values, gradients, in_bound mask)."""
        vals, g_obj, inside = self.gradient_object(pose.inverse().apply(pts_world))
        return vals, g_obj @ pose.R.T, inside


# -- functional aliases --------------------------------------------------------

def field_eval(cfg: FieldConfig, params: FieldParams, pose: Pose, pts: np.ndarray):
    return NeuralField(cfg, params).eval(pose, pts)


def field_backward_params(cfg, params, pose, pts, upstream):
    return NeuralField(cfg, params).backward_params(pose, pts, upstream)


def field_gradient_point(cfg, params, pose, pts):
    return NeuralField(cfg, params).gradient(pose, pts)


# -- serialization -------------------------------------------------------------

_CFG_FIELDS = ("levels", "features_per_level", "table_size", "base_resolution", "mlp_layers",
               "mlp_width")


def save_params(params: FieldParams, path) -> None:
    """Binary blob: magic, version, config echo (u32/f64), then little-endian float32 parameters."""
    cfg = params.cfg
    header = MAGIC + struct.pack("<I", FORMAT_VERSION)
    header += struct.pack("<6I", *(getattr(cfg, k) for k in _CFG_FIELDS))
    header += struct.pack("<8d", cfg.growth_factor, cfg.bound_side, *cfg.bound_center,
                          cfg.truncation, cfg.softplus_beta, 0.0)
    header += struct.pack("<Q", cfg.param_count())
    Path(path).write_bytes(header + params.theta.astype("<f4").tobytes())


def load_params(path) -> FieldParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError("not a field parameter file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {version}")
    ints = struct.unpack_from("<6I", data, 8)
    floats = struct.unpack_from("<8d", data, 32)
    (count,) = struct.unpack_from("<Q", data, 96)
    cfg = FieldConfig(**dict(zip(_CFG_FIELDS, ints)), growth_factor=floats[0], bound_side=floats[1],
                      bound_center=tuple(floats[2:5]), truncation=floats[5], softplus_beta=floats[6])
    if cfg.param_count() != count:
        raise ValueError("parameter count does not match the stored config")
    if len(data) != 104 + 4 * count:
        raise ValueError("truncated parameter file")
    theta = np.frombuffer(data, dtype="<f4", count=count, offset=104).astype(np.float64)
    return FieldParams(cfg, theta)
