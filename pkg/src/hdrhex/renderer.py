"""Ray generation, sampling, volume rendering, occupancy skipping, tone map.

Compositing is front-to-back over ray strata: alpha_i = 1 - exp(-sigma_i
delta_i), transmittance T_i multiplies the (1 - alpha) of everything in
front, and each sample contributes weight w_i = T_i alpha_i. The same
quadrature composites display colors (LDR path) and linear radiance (HDR
path), sharing one set of weights per ray.

Deltas are the stratum widths, so they always sum to far - near regardless
of where inside its stratum each sample landed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .decoder import RadianceDecoder, posenc
from .diffcore import SeededRng
from .errors import ArgumentError
from .exposure import CrfMode, ExposureTable
from .hexplane import HexPlaneField

DEPTH_EPS = 1e-10
DEFAULT_SAMPLES = 64
DEFAULT_MU = 5000.0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray  # 4x4 camera-to-world, camera looks down -z
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ArgumentError("focal lengths must be positive")
        r = self.c2w[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ArgumentError("camera rotation block is not orthonormal")


@dataclass
class Ray:
    o: np.ndarray
    d: np.ndarray
    t_cap: float
    near: float
    far: float
    image_index: int = -1

    def __post_init__(self):
        self.o = np.asarray(self.o, dtype=np.float64).reshape(3)
        self.d = np.asarray(self.d, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.d) - 1.0) > 1e-6:
            raise ArgumentError("ray direction must be unit length")
        if not (self.far > self.near > 0):
            raise ArgumentError(f"need far > near > 0, got "
                                f"near={self.near} far={self.far}")


@dataclass
class SampleBatch:
    positions: np.ndarray  # (n, 3)
    depths: np.ndarray     # (n,)
    deltas: np.ndarray     # (n,)
    mask: np.ndarray       # (n,) True where the sample is active


@dataclass
class RenderOutput:
    ldr: Optional[np.ndarray]
    hdr: np.ndarray
    depth: float
    opacity: float


def generate_ray(camera: Camera, px: int, py: int, t_cap: float,
                 j: int = -1, near: float = 0.1, far: float = 10.0) -> Ray:
    """Ray through the center of pixel (px, py)."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ArgumentError(f"pixel ({px},{py}) outside "
                            f"{camera.width}x{camera.height} frame")
    o, d = camera_rays(camera, np.array([px]), np.array([py]))
    return Ray(o=o[0], d=d[0], t_cap=t_cap, near=near, far=far, image_index=j)


def camera_rays(camera: Camera, pxs: np.ndarray, pys: np.ndarray):
    """Vectorized pixel-center back-projection -> (origins, unit dirs)."""
    x = (pxs + 0.5 - camera.cx) / camera.fx
    y = -(pys + 0.5 - camera.cy) / camera.fy
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    r = camera.c2w[:3, :3]
    dirs = dirs_cam @ r.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], dirs.shape).copy()
    return origins, dirs


def intersect_aabb(o: np.ndarray, d: np.ndarray, aabb: np.ndarray,
                   near: float, far: float):
    """Clip [near, far] against an axis-aligned box (slab test).

    Returns (t0, t1, hit) arrays; rays that miss have hit=False and
    unspecified bounds.
    """
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    lo, hi = aabb[0], aabb[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    # fmin/fmax drop NaNs from 0 * inf on axis-parallel boundary rays
    tmin = np.nan_to_num(np.fmin(ta, tb), nan=-np.inf,
                         posinf=np.inf, neginf=-np.inf).max(axis=1)
    tmax = np.nan_to_num(np.fmax(ta, tb), nan=np.inf,
                         posinf=np.inf, neginf=-np.inf).min(axis=1)
    t0 = np.maximum(tmin, near)
    t1 = np.minimum(tmax, far)
    hit = t1 > t0
    return t0, t1, hit


def sample_ray(ray: Ray, n: int, rng: Optional[SeededRng] = None,
               stratified: bool = False) -> SampleBatch:
    """n samples in equal-width strata over [near, far]."""
    if n < 1:
        raise ArgumentError(f"need at least one sample, got {n}")
    depths, deltas = _stratum_samples(ray.near, ray.far, n,
                                      rng if stratified else None)
    positions = ray.o[None, :] + depths[:, None] * ray.d[None, :]
    return SampleBatch(positions=positions, depths=depths, deltas=deltas,
                       mask=np.ones(n, dtype=bool))


def _stratum_samples(near, far, n, rng: Optional[SeededRng]):
    """Depths and stratum widths; scalar or per-ray array bounds."""
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    shape = near.shape + (n,)
    k = np.arange(n)
    width = ((far - near) / n)[..., None] if near.ndim else (far - near) / n
    lower = near[..., None] + k * width if near.ndim else near + k * width
    if rng is None:
        u = 0.5
    else:
        u = rng.uniform(size=shape)
    depths = lower + u * width
    deltas = np.broadcast_to(width, shape).copy()
    return depths, deltas


def volume_render(values: np.ndarray, sigmas: np.ndarray,
                  deltas: np.ndarray):
    """Composite one ray -> (pixel, weights, depth, opacity)."""
    values = np.asarray(values, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(sigmas < 0):
        raise ArgumentError("densities must be non-negative")
    if np.any(deltas < 0):
        raise ArgumentError("segment lengths must be non-negative")
    out = _composite(values[None], sigmas[None], deltas[None],
                     depths=None)
    pixel, weights, opacity = out["pixel"][0], out["weights"][0], out["opacity"][0]
    # depth from the quadrature abscissae requires depths; use cumulative
    # segment midpoints consistent with the deltas
    t = np.cumsum(deltas) - deltas / 2.0
    depth = float((weights * t).sum() / max(opacity, DEPTH_EPS))
    return pixel, weights, depth, float(opacity)


def _composite(values, sigmas, deltas, depths=None, want_cache=False):
    """Batched front-to-back compositing.

    values (B,n,3), sigmas (B,n), deltas (B,n) -> pixel (B,3), weights,
    opacity, and expected depth when depths are given.
    """
    alpha = -np.expm1(-sigmas * deltas)
    trans_next = np.cumprod(1.0 - alpha, axis=1)  # T_{i+1}
    trans = np.concatenate([np.ones_like(alpha[:, :1]),
                            trans_next[:, :-1]], axis=1)  # T_i
    weights = trans * alpha
    pixel = np.einsum("bn,bnc->bc", weights, values)
    opacity = weights.sum(axis=1)
    out = {"pixel": pixel, "weights": weights, "opacity": opacity,
           "alpha": alpha}
    if depths is not None:
        out["depth"] = np.einsum("bn,bn->b", weights, depths) \
            / np.maximum(opacity, DEPTH_EPS)
    if want_cache:
        out["cache"] = (values, sigmas, deltas, alpha, trans_next, weights)
    return out


def _composite_backward(cache, d_pixel):
    """dL/dpixel (B,3) -> (d_values (B,n,3), d_sigmas (B,n))."""
    values, sigmas, deltas, alpha, trans_next, weights = cache
    d_values = weights[:, :, None] * d_pixel[:, None, :]
    gw = np.einsum("bc,bnc->bn", d_pixel, values)  # dL/dw_i
    gww = gw * weights
    # strict suffix sum of gw*w: Q_j = sum_{i>j} gw_i w_i
    suffix = np.cumsum(gww[:, ::-1], axis=1)[:, ::-1]
    q = suffix - gww
    d_sigmas = deltas * (gw * trans_next - q)
    return d_values, d_sigmas


def tone_map(e, mu: float = DEFAULT_MU):
    """Log-compressive display mapping: log(1 + mu E) / log(1 + mu)."""
    e = np.asarray(e, dtype=np.float64)
    if np.any(e < 0):
        raise ArgumentError("tone_map input radiance must be >= 0")
    if not mu > 0:
        raise ArgumentError(f"mu must be positive, got {mu}")
    out = np.log1p(mu * e) / np.log1p(mu)
    return np.minimum(out, 1.0)


class OccupancyGrid:
    """Binary emptiness mask over the field's aabb and the time range."""

    def __init__(self, aabb: np.ndarray, res: int = 32, time_res: int = 8,
                 tau: float = 1e-3):
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.res = res
        self.time_res = time_res
        self.tau = float(tau)
        self.mask = np.ones((time_res, res, res, res), dtype=bool)

    def update(self, field: HexPlaneField, decoder: RadianceDecoder) -> None:
        """Mark cells whose sampled max density reaches tau.

        Density is probed on the cell-corner lattice of the grid (plus the
        corner lattice in time); a cell's score is the max over its corners,
        dilated by one cell so geometry near boundaries stays safe. Cells
        below tau after that are marked empty.
        """
        m, mt = self.res, self.time_res
        lo, hi = self.aabb
        axes = [np.linspace(lo[a], hi[a], m + 1) for a in range(3)]
        xs, ys, zs = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
        occupied = np.zeros((mt, m, m, m), dtype=bool)
        corner_max = np.zeros((mt + 1, m + 1, m + 1, m + 1))
        for k in range(mt + 1):
            t = k / mt
            feats = field.query_batch(pts, np.full(pts.shape[0], t))
            sigma = decoder.density_only(feats, pts, np.full(pts.shape[0], t))
            corner_max[k] = sigma.reshape(m + 1, m + 1, m + 1)
        # cell max over its 16 (time x space) corners
        cell = corner_max
        for axis in range(4):
            hi_slice = [slice(None)] * 4
            lo_slice = [slice(None)] * 4
            hi_slice[axis] = slice(1, None)
            lo_slice[axis] = slice(None, -1)
            cell = np.maximum(cell[tuple(lo_slice)], cell[tuple(hi_slice)])
        occupied = cell >= self.tau
        if self.tau <= 0:
            occupied[...] = True
        self.mask = _dilate(occupied)

    def lookup(self, positions: np.ndarray, times: np.ndarray) -> np.ndarray:
        """True where a sample falls in an occupied cell."""
        lo, hi = self.aabb
        norm = np.clip((positions - lo) / (hi - lo), 0.0, 1.0)
        idx = np.minimum((norm * self.res).astype(np.int64), self.res - 1)
        tidx = np.minimum((np.clip(times, 0.0, 1.0) * self.time_res)
                          .astype(np.int64), self.time_res - 1)
        return self.mask[tidx, idx[..., 0], idx[..., 1], idx[..., 2]]

    def prune(self, batch: SampleBatch, t_cap: float) -> SampleBatch:
        """Mask samples in empty cells; never activates a masked sample."""
        keep = self.lookup(batch.positions, np.full(batch.depths.shape, t_cap))
        return SampleBatch(positions=batch.positions, depths=batch.depths,
                           deltas=batch.deltas, mask=batch.mask & keep)


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for axis in range(mask.ndim):
        shifted_fwd = np.roll(mask, 1, axis=axis)
        shifted_bwd = np.roll(mask, -1, axis=axis)
        # roll wraps around; kill the wrapped slices
        sl = [slice(None)] * mask.ndim
        sl[axis] = 0
        shifted_fwd[tuple(sl)] = False
        sl[axis] = -1
        shifted_bwd[tuple(sl)] = False
        out |= shifted_fwd | shifted_bwd
    return out


@dataclass
class RayBundle:
    """Vectorized rays for batched rendering."""
    o: np.ndarray            # (B, 3)
    d: np.ndarray            # (B, 3)
    t_cap: np.ndarray        # (B,)
    near: np.ndarray         # (B,)
    far: np.ndarray          # (B,)
    image_index: np.ndarray  # (B,) int, -1 where exposure-free
    hit: np.ndarray          # (B,) False where the ray misses the scene box

    @property
    def count(self) -> int:
        return self.o.shape[0]


def make_bundle(o, d, t_cap, near, far, image_index=None,
                aabb: Optional[np.ndarray] = None) -> RayBundle:
    """Assemble a RayBundle, optionally clipping bounds to a scene box."""
    o = np.asarray(o, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    b = o.shape[0]
    t_cap = np.broadcast_to(np.asarray(t_cap, dtype=np.float64), (b,)).copy()
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (b,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (b,)).copy()
    if image_index is None:
        image_index = np.full(b, -1, dtype=np.int64)
    else:
        image_index = np.broadcast_to(
            np.asarray(image_index, dtype=np.int64), (b,)).copy()
    hit = np.ones(b, dtype=bool)
    if aabb is not None:
        t0, t1, hit = intersect_aabb(o, d, aabb, near, far)
        near = np.where(hit, t0, near)
        far = np.where(hit, t1, far)
    return RayBundle(o=o, d=d, t_cap=t_cap, near=near, far=far,
                     image_index=image_index, hit=hit)


def render_bundle(field: HexPlaneField, decoder: RadianceDecoder,
                  crf_mode: Optional[CrfMode], bundle: RayBundle,
                  e_prime: Optional[np.ndarray] = None,
                  n_samples: int = DEFAULT_SAMPLES,
                  rng: Optional[SeededRng] = None, stratified: bool = False,
                  occupancy: Optional[OccupancyGrid] = None,
                  want_ldr: bool = True, want_hdr: bool = False,
                  want_ctx: bool = False):
    """Render a bundle of rays in one vectorized pass.

    e_prime: per-ray log-exposure (required for the LDR path). Returns a
    dict with 'ldr' (B,3), 'hdr' (B,3), 'depth' (B,), 'opacity' (B,),
    'n_active' and, when requested, the context for render_backward.
    """
    b, n = bundle.count, n_samples
    if want_ldr and e_prime is None:
        raise ArgumentError("LDR rendering needs per-ray log-exposures")
    depths, deltas = _stratum_samples(bundle.near, bundle.far, n,
                                      rng if stratified else None)
    positions = bundle.o[:, None, :] + depths[..., None] * bundle.d[:, None, :]
    active = np.repeat(bundle.hit[:, None], n, axis=1)
    t_samples = np.repeat(bundle.t_cap[:, None], n, axis=1)
    if occupancy is not None:
        active &= occupancy.lookup(positions, t_samples)

    flat_idx = np.nonzero(active.reshape(-1))[0]
    ray_id = flat_idx // n
    pts = positions.reshape(-1, 3)[flat_idx]
    ts = t_samples.reshape(-1)[flat_idx]
    dirs = bundle.d[ray_id]

    feats, hex_ctx = field.query_batch(pts, ts, want_ctx=True)
    sigma_a, elog_a, dec_ctx = decoder.forward_batch(feats, pts, dirs, ts,
                                                     want_ctx=True)

    sigmas = np.zeros((b * n,))
    sigmas[flat_idx] = sigma_a
    sigmas = sigmas.reshape(b, n)

    out = {"depth": None, "opacity": None, "n_active": flat_idx.size}
    crf_ctx = None
    ldr_cache = None
    if want_ldr:
        x = elog_a + e_prime[ray_id][:, None]
        c_a, crf_ctx = crf_mode.apply(x, want_ctx=True)
        vals = np.zeros((b * n, 3))
        vals[flat_idx] = c_a
        vals = vals.reshape(b, n, 3)
        comp = _composite(vals, sigmas, deltas, depths=depths,
                          want_cache=want_ctx)
        out["ldr"] = comp["pixel"]
        out["depth"] = comp["depth"]
        out["opacity"] = comp["opacity"]
        ldr_cache = comp.get("cache")
    if want_hdr:
        hdr_a = np.exp(elog_a)
        vals = np.zeros((b * n, 3))
        vals[flat_idx] = hdr_a
        vals = vals.reshape(b, n, 3)
        comp = _composite(vals, sigmas, deltas, depths=depths)
        out["hdr"] = comp["pixel"]
        if out["depth"] is None:
            out["depth"] = comp["depth"]
            out["opacity"] = comp["opacity"]
    # empty rays report the far bound as depth
    if out["depth"] is not None:
        empty = out["opacity"] <= 0.0
        out["depth"] = np.where(empty, bundle.far, out["depth"])
    if want_ctx:
        out["ctx"] = (field, decoder, crf_mode, bundle, flat_idx, ray_id,
                      hex_ctx, dec_ctx, crf_ctx, ldr_cache, b, n)
    return out


def render_backward(ctx, d_ldr: np.ndarray,
                    want_input_grads: bool = False) -> np.ndarray:
    """Backpropagate dL/d(ldr pixel) through the whole LDR pipeline.

    Accumulates gradients into field, decoder, and CRF parameters and
    returns dL/d(e_prime) per ray.
    """
    (field, decoder, crf_mode, bundle, flat_idx, ray_id, hex_ctx, dec_ctx,
     crf_ctx, ldr_cache, b, n) = ctx
    d_values, d_sigmas = _composite_backward(ldr_cache, d_ldr)
    dc_a = d_values.reshape(-1, 3)[flat_idx]
    d_sigma_a = d_sigmas.reshape(-1)[flat_idx]
    dx = crf_mode.apply_backward(crf_ctx, dc_a)
    d_elog_a = dx
    d_eprime_ray = np.bincount(ray_id, weights=dx.sum(axis=1), minlength=b)
    d_feats = decoder.backward_batch(dec_ctx, d_sigma_a, d_elog_a,
                                     want_input_grads=want_input_grads)
    if want_input_grads:
        d_feats = d_feats[0]
    field.query_backward(hex_ctx, d_feats)
    return d_eprime_ray


def render_image(field: HexPlaneField, decoder: RadianceDecoder,
                 crf_mode: Optional[CrfMode], camera: Camera, t_cap: float,
                 near: float, far: float, e_prime: Optional[float] = None,
                 n_samples: int = DEFAULT_SAMPLES,
                 occupancy: Optional[OccupancyGrid] = None,
                 cols: Optional[np.ndarray] = None, want_hdr: bool = True,
                 chunk: int = 4096) -> dict:
    """Render an image (optionally only selected pixel columns).

    Deterministic midpoint sampling. Returns 'ldr' (when e_prime is given),
    'hdr', 'depth', 'opacity' as (H, n_cols, ...) arrays.
    """
    if cols is None:
        cols = np.arange(camera.width)
    cols = np.asarray(cols, dtype=np.int64)
    h, w = camera.height, cols.size
    pys, pxs = np.meshgrid(np.arange(h), cols, indexing="ij")
    o, d = camera_rays(camera, pxs.reshape(-1), pys.reshape(-1))
    want_ldr = e_prime is not None
    parts = {k: [] for k in ("ldr", "hdr", "depth", "opacity")}
    for lo in range(0, o.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        bundle = make_bundle(o[sl], d[sl], t_cap, near, far,
                             aabb=field.aabb)
        e = np.full(bundle.count, e_prime) if want_ldr else None
        out = render_bundle(field, decoder, crf_mode, bundle, e_prime=e,
                            n_samples=n_samples, occupancy=occupancy,
                            want_ldr=want_ldr, want_hdr=want_hdr)
        if want_ldr:
            parts["ldr"].append(out["ldr"])
        if want_hdr:
            parts["hdr"].append(out["hdr"])
        parts["depth"].append(out["depth"])
        parts["opacity"].append(out["opacity"])
    result = {}
    if want_ldr:
        result["ldr"] = np.concatenate(parts["ldr"]).reshape(h, w, 3)
    if want_hdr:
        result["hdr"] = np.concatenate(parts["hdr"]).reshape(h, w, 3)
    result["depth"] = np.concatenate(parts["depth"]).reshape(h, w)
    result["opacity"] = np.concatenate(parts["opacity"]).reshape(h, w)
    return result


def render_pixel(field: HexPlaneField, decoder: RadianceDecoder,
                 exposure_table: Optional[ExposureTable],
                 crf_mode: Optional[CrfMode], ray: Ray, mode: str = "ldr",
                 n_samples: int = DEFAULT_SAMPLES,
                 rng: Optional[SeededRng] = None, stratified: bool = False,
                 occupancy: Optional[OccupancyGrid] = None,
                 e_prime_override: Optional[float] = None,
                 mu: float = DEFAULT_MU) -> RenderOutput:
    """Render one ray in the requested mode.

    LDR mode resolves the exposure from the ray's image index unless
    e_prime_override is given; HDR and tone-mapped modes are exposure-free.
    """
    if mode not in ("ldr", "hdr", "tonemapped"):
        raise ArgumentError(f"unknown render mode {mode!r}")
    want_ldr = mode == "ldr"
    e_prime = None
    if want_ldr:
        if e_prime_override is not None:
            e_prime = np.array([float(e_prime_override)])
        else:
            if exposure_table is None:
                raise ArgumentError("LDR mode needs an exposure table or an "
                                    "explicit log-exposure")
            e_prime = np.array([exposure_table.exposure_log(ray.image_index)])
    bundle = make_bundle(ray.o, ray.d, ray.t_cap, ray.near, ray.far,
                         image_index=[ray.image_index], aabb=field.aabb)
    out = render_bundle(field, decoder, crf_mode, bundle, e_prime=e_prime,
                        n_samples=n_samples, rng=rng, stratified=stratified,
                        occupancy=occupancy, want_ldr=want_ldr, want_hdr=True)
    hdr = out["hdr"][0]
    ldr = None
    if mode == "ldr":
        ldr = out["ldr"][0]
    elif mode == "tonemapped":
        ldr = tone_map(hdr, mu=mu)
    return RenderOutput(ldr=ldr, hdr=hdr, depth=float(out["depth"][0]),
                        opacity=float(out["opacity"][0]))
