"""Factorized 4D feature volume: six feature planes plus basis vectors.

A query at (x, y, z, t) bilinearly interpolates each of the six planes and
combines them as three rank-summed products:

    D[f] = sum_r XY_r[f] * ZT_r[f] * v1[r, f]
         + sum_r XZ_r[f] * TY_r[f] * v2[r, f]
         + sum_r YZ_r[f] * XT_r[f] * v3[r, f]

Since each coordinate enters exactly one bilinear factor per product, the
result is multilinear in (x, y, z, t) and identical to quad-linear
interpolation of the densified tensor (the oracle used in tests).
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .diffcore import ParamTensor, SeededRng, uniform_init
from .errors import ArgumentError

# plane (u-axis, v-axis) pairs, grouped into the three products
PLANE_AXES = (("x", "y"), ("z", "t"), ("x", "z"),
              ("t", "y"), ("y", "z"), ("x", "t"))
PRODUCTS = ((0, 1), (2, 3), (4, 5))

PLANE_INIT_CENTER = 0.1
PLANE_INIT_SCALE = 0.05


@dataclass
class GridConfig:
    spatial_res: int = 32
    time_res_init: int = 16
    time_res_final: int = 24
    ranks: tuple = (2, 2, 2)
    channels: int = 8
    upsample_steps: tuple = (1000, 2000)

    def __post_init__(self):
        if not (self.time_res_final >= self.time_res_init >= 2):
            raise ArgumentError(
                f"need time_res_final >= time_res_init >= 2, got "
                f"{self.time_res_final} < {self.time_res_init}")


class PlaneGrid:
    """One feature plane: data of shape [rank * channels, res_u, res_v]."""

    def __init__(self, axis_pair: tuple, rank: int, channels: int,
                 data: np.ndarray, name: str):
        self.axis_pair = axis_pair
        self.rank = rank
        self.channels = channels
        self.data = ParamTensor(data, name)
        if self.data.values.shape[0] != rank * channels:
            raise ArgumentError(
                f"plane {name}: leading dim {self.data.values.shape[0]} "
                f"!= rank*channels {rank * channels}")

    @property
    def res_u(self) -> int:
        return self.data.values.shape[1]

    @property
    def res_v(self) -> int:
        return self.data.values.shape[2]


def _node_coords(u: np.ndarray, res: int):
    """Map [0,1] coordinates to (lower index, fraction) on a res-node axis."""
    s = np.clip(u, 0.0, 1.0) * (res - 1)
    i0 = np.minimum(s.astype(np.int64), res - 2)
    frac = s - i0
    return i0, frac


def bilerp(plane: PlaneGrid, u, v) -> np.ndarray:
    """Bilinear interpolation at (u, v) in [0,1]^2; clamps outside values.

    Scalar u, v produce a vector of length rank*channels; array inputs of
    shape (N,) produce (rank*channels, N).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ArgumentError("bilerp coordinates must be finite")
    scalar = u.ndim == 0
    out, _ = _bilerp_cached(plane.data.values, np.atleast_1d(u), np.atleast_1d(v))
    return out[:, 0] if scalar else out


def _bilerp_cached(data: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Vectorized bilerp returning (values, cache-for-backward)."""
    ru, rv = data.shape[1], data.shape[2]
    iu, fu = _node_coords(u, ru)
    iv, fv = _node_coords(v, rv)
    flat = data.reshape(data.shape[0], -1)
    idx00 = iu * rv + iv
    idx01 = idx00 + 1
    idx10 = idx00 + rv
    idx11 = idx10 + 1
    w00 = (1 - fu) * (1 - fv)
    w01 = (1 - fu) * fv
    w10 = fu * (1 - fv)
    w11 = fu * fv
    vals = (flat[:, idx00] * w00 + flat[:, idx01] * w01
            + flat[:, idx10] * w10 + flat[:, idx11] * w11)
    cache = (np.stack([idx00, idx01, idx10, idx11]),
             np.stack([w00, w01, w10, w11]))
    return vals, cache


def _bilerp_backward(plane: PlaneGrid, cache, dvals: np.ndarray) -> None:
    """Scatter dL/d(interpolated values) back into the plane's grad."""
    idx, w = cache
    c = plane.data.values.shape[0]
    cells = plane.res_u * plane.res_v
    flat_idx = idx.reshape(-1)  # (4N,)
    gflat = plane.data.grad.reshape(c, -1)
    contrib = dvals[:, None, :] * w[None, :, :]  # (C, 4, N)
    contrib = contrib.reshape(c, -1)
    for ch in range(c):
        gflat[ch] += np.bincount(flat_idx, weights=contrib[ch],
                                 minlength=cells)


class HexPlaneField:
    """Six planes + three basis-vector sets over a spatial aabb and t in [0,1]."""

    def __init__(self, aabb: np.ndarray, config: GridConfig, rng: SeededRng):
        self.aabb = np.array(aabb, dtype=np.float64).reshape(2, 3)
        if not np.all(self.aabb[1] > self.aabb[0]):
            raise ArgumentError("aabb must be non-degenerate (max > min)")
        self.config = config
        self.channels = config.channels
        self.ranks = tuple(config.ranks)
        self.spatial_res = config.spatial_res
        self.time_res = config.time_res_init

        self.planes = []
        for pi, (a, b) in enumerate(PLANE_AXES):
            rank = self.ranks[pi // 2]
            ua = self.time_res if a == "t" else self.spatial_res
            vb = self.time_res if b == "t" else self.spatial_res
            data = uniform_init(rng, (rank * config.channels, ua, vb),
                                PLANE_INIT_SCALE, center=PLANE_INIT_CENTER)
            self.planes.append(PlaneGrid((a, b), rank, config.channels, data,
                                         name=f"field.plane_{a}{b}"))
        self.vectors = [
            ParamTensor(np.ones((self.ranks[i], config.channels)),
                        name=f"field.basis_{i + 1}")
            for i in range(3)
        ]

    def params(self):
        for p in self.planes:
            yield p.data
        yield from self.vectors

    def normalize_points(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = self.aabb
        return np.clip((pts - lo) / (hi - lo), 0.0, 1.0)

    def _axis_coord(self, axis: str, uvw: np.ndarray, ts: np.ndarray):
        if axis == "t":
            return np.clip(ts, 0.0, 1.0)
        return uvw[:, "xyz".index(axis)]

    def query_batch(self, pts: np.ndarray, ts: np.ndarray,
                    want_ctx: bool = False):
        """Feature vectors D for points (N,3) and times (N,) -> (N, F).

        With want_ctx=True also returns the cache consumed by
        query_backward.
        """
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        ts = np.asarray(ts, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(ts))):
            raise ArgumentError("query positions and times must be finite")
        n = pts.shape[0]
        f = self.channels
        uvw = self.normalize_points(pts)

        plane_vals = []
        plane_caches = []
        for plane in self.planes:
            cu = self._axis_coord(plane.axis_pair[0], uvw, ts)
            cv = self._axis_coord(plane.axis_pair[1], uvw, ts)
            vals, cache = _bilerp_cached(plane.data.values, cu, cv)
            plane_vals.append(vals)
            plane_caches.append(cache)

        d = np.zeros((f, n))
        for gi, (ia, ib) in enumerate(PRODUCTS):
            r = self.ranks[gi]
            a = plane_vals[ia].reshape(r, f, n)
            b = plane_vals[ib].reshape(r, f, n)
            d += np.einsum("rfn,rf->fn", a * b, self.vectors[gi].values)
        out = d.T.copy()
        if want_ctx:
            return out, (plane_vals, plane_caches)
        return out

    def query(self, x, t) -> np.ndarray:
        """Single-point query: world position (3,) and time -> (F,)."""
        return self.query_batch(np.asarray(x).reshape(1, 3), [t])[0]

    def query_backward(self, ctx, d_out: np.ndarray) -> None:
        """Accumulate dL/dD (N,F) into plane and vector gradients."""
        plane_vals, plane_caches = ctx
        f = self.channels
        dt = np.ascontiguousarray(d_out.T)  # (F, N)
        for gi, (ia, ib) in enumerate(PRODUCTS):
            r = self.ranks[gi]
            a = plane_vals[ia].reshape(r, f, -1)
            b = plane_vals[ib].reshape(r, f, -1)
            vec = self.vectors[gi].values  # (R, F)
            self.vectors[gi].grad += np.einsum("fn,rfn->rf", dt, a * b)
            scaled = dt[None, :, :] * vec[:, :, None]  # (R, F, N)
            da = (scaled * b).reshape(r * f, -1)
            db = (scaled * a).reshape(r * f, -1)
            _bilerp_backward(self.planes[ia], plane_caches[ia], da)
            _bilerp_backward(self.planes[ib], plane_caches[ib], db)

    def tv_loss(self, want_grad: bool = False,
                grad_scale: float = 1.0) -> float:
        """Mean squared difference of adjacent entries, summed over planes."""
        total = 0.0
        for plane in self.planes:
            v = plane.data.values
            du = v[:, 1:, :] - v[:, :-1, :]
            dv = v[:, :, 1:] - v[:, :, :-1]
            count = du.size + dv.size
            total += (np.sum(du * du) + np.sum(dv * dv)) / count
            if want_grad:
                g = plane.data.grad
                scale = 2.0 * grad_scale / count
                g[:, 1:, :] += scale * du
                g[:, :-1, :] -= scale * du
                g[:, :, 1:] += scale * dv
                g[:, :, :-1] -= scale * dv
        return float(total)

    def upsample(self, new_spatial_res: int, new_time_res: int) -> "HexPlaneField":
        """New field with planes resampled onto a finer node lattice."""
        if new_spatial_res < self.spatial_res or new_time_res < self.time_res:
            raise ArgumentError(
                f"upsample cannot shrink resolution: spatial "
                f"{self.spatial_res}->{new_spatial_res}, time "
                f"{self.time_res}->{new_time_res}")
        out = HexPlaneField.__new__(HexPlaneField)
        out.aabb = self.aabb.copy()
        out.config = self.config
        out.channels = self.channels
        out.ranks = self.ranks
        out.spatial_res = new_spatial_res
        out.time_res = new_time_res
        out.planes = []
        for plane in self.planes:
            ua = new_time_res if plane.axis_pair[0] == "t" else new_spatial_res
            vb = new_time_res if plane.axis_pair[1] == "t" else new_spatial_res
            data = _resample_plane(plane.data.values, ua, vb)
            out.planes.append(PlaneGrid(plane.axis_pair, plane.rank,
                                        plane.channels, data,
                                        name=plane.data.name))
        out.vectors = [ParamTensor(v.values.copy(), v.name)
                       for v in self.vectors]
        return out


def _resample_axis(data: np.ndarray, axis: int, new_res: int) -> np.ndarray:
    """Linear resample along one axis; corner nodes map to corner nodes."""
    old_res = data.shape[axis]
    if new_res == old_res:
        return data.copy()
    s = np.linspace(0.0, 1.0, new_res) * (old_res - 1)
    i0 = np.minimum(s.astype(np.int64), old_res - 2)
    frac = s - i0
    moved = np.moveaxis(data, axis, 0)
    res = moved[i0] * (1 - frac).reshape(-1, *([1] * (moved.ndim - 1))) \
        + moved[i0 + 1] * frac.reshape(-1, *([1] * (moved.ndim - 1)))
    return np.moveaxis(res, 0, axis)


def _resample_plane(data: np.ndarray, new_u: int, new_v: int) -> np.ndarray:
    return _resample_axis(_resample_axis(data, 1, new_u), 2, new_v)
