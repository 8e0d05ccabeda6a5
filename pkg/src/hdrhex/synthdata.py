"""Procedural dynamic HDR scenes with known exposures and response curve.

Scenes are unions of emissive primitives (spheres and boxes) on analytic
trajectories inside a unit-ish box. Ground truth renders ray-march the
analytic field with the same compositing quadrature as the model renderer:
the HDR image is composited linear radiance, and each LDR image applies the
generator's response curve to log radiance plus EV * ln 2, then quantizes
to 8 bits. Exposure is parameterized in stops: linear exposure 2^EV, so an
arithmetic EV list yields equidistant log-exposures.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .errors import ArgumentError, DataError
from .images import dequantize, quantize, read_pfm, read_png, write_pfm, \
    write_png
from .renderer import Camera, _composite, camera_rays, _stratum_samples

LN2 = math.log(2.0)
LOG_FLOOR = -40.0
MANIFEST_VERSION = 1
GT_SAMPLES = 256
SCENE_NAMES = ("lego-like", "mutant-like")


@dataclass
class Trajectory:
    kind: str = "static"            # static | linear | sinusoidal
    base: tuple = (0.0, 0.0, 0.0)
    delta: tuple = (0.0, 0.0, 0.0)
    freq: float = 1.0
    phase: float = 0.0

    def center(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        base = np.asarray(self.base)
        delta = np.asarray(self.delta)
        if self.kind == "static":
            off = np.zeros_like(t)
        elif self.kind == "linear":
            off = t
        elif self.kind == "sinusoidal":
            off = np.sin(2.0 * np.pi * (self.freq * t + self.phase))
        else:
            raise ArgumentError(f"unknown trajectory kind {self.kind!r}")
        return base + off[..., None] * delta


@dataclass
class Primitive:
    shape: str                      # sphere | box
    trajectory: Trajectory
    extent: tuple                   # (radius,) or three half-sizes
    radiance: tuple                 # linear HDR radiance per channel
    density: float

    def inside(self, x: np.ndarray, t) -> np.ndarray:
        c = self.trajectory.center(t)
        rel = x - c
        if self.shape == "sphere":
            return (rel * rel).sum(axis=-1) <= self.extent[0] ** 2
        if self.shape == "box":
            half = np.asarray(self.extent)
            return np.all(np.abs(rel) <= half, axis=-1)
        raise ArgumentError(f"unknown primitive shape {self.shape!r}")


@dataclass
class SceneSpec:
    name: str
    primitives: list
    aabb: np.ndarray

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)


@dataclass
class CaptureSpec:
    n_cameras: int
    n_frames: int
    evs: tuple
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0
    distance: float = 3.5
    azimuth_range: tuple = (-30.0, 30.0)
    elevation_deg: float = 18.0
    moving_camera: bool = True

    def __post_init__(self):
        if len(set(self.evs)) < 2:
            raise ArgumentError("need at least two distinct exposure values")


def eval_scene(spec: SceneSpec, x: np.ndarray, t):
    """Analytic field: (radiance (...,3), sigma (...)) at points and times.

    Overlapping primitives resolve to the densest one.
    """
    x = np.asarray(x, dtype=np.float64)
    radiance = np.zeros(x.shape[:-1] + (3,))
    sigma = np.zeros(x.shape[:-1])
    best = np.full(x.shape[:-1], -np.inf)
    for prim in spec.primitives:
        mask = prim.inside(x, t) & (prim.density > best)
        radiance[mask] = np.asarray(prim.radiance)
        sigma[mask] = prim.density
        best = np.where(mask, prim.density, best)
    return radiance, sigma


def lego_like_scene() -> SceneSpec:
    """Rigid-motion scene: hot and dim statics plus one traversing sphere."""
    return SceneSpec(name="lego-like", aabb=[[-1, -1, -1], [1, 1, 1]],
                     primitives=[
        Primitive("sphere", Trajectory("static", (-0.45, 0.32, 0.05)),
                  (0.28,), (30.0, 24.0, 18.0), 80.0),
        Primitive("sphere", Trajectory("linear", (-0.5, -0.12, 0.3),
                                       (1.0, 0.0, 0.0)),
                  (0.22,), (2.5, 1.4, 0.7), 80.0),
        Primitive("box", Trajectory("static", (0.42, -0.4, -0.25)),
                  (0.32, 0.2, 0.26), (0.04, 0.032, 0.05), 80.0),
        Primitive("box", Trajectory("static", (0.0, 0.45, -0.3)),
                  (0.25, 0.22, 0.08), (1.0, 0.85, 0.55), 80.0),
    ])


def mutant_like_scene() -> SceneSpec:
    """Deforming ensemble: several primitives on sinusoidal paths."""
    return SceneSpec(name="mutant-like", aabb=[[-1, -1, -1], [1, 1, 1]],
                     primitives=[
        Primitive("sphere", Trajectory("sinusoidal", (-0.4, 0.28, 0.0),
                                       (0.0, 0.16, 0.0)),
                  (0.26,), (30.0, 24.0, 18.0), 80.0),
        Primitive("sphere", Trajectory("sinusoidal", (0.32, -0.08, 0.2),
                                       (0.22, 0.2, 0.0), phase=0.25),
                  (0.18,), (2.2, 1.1, 0.6), 80.0),
        Primitive("box", Trajectory("static", (0.4, -0.45, -0.3)),
                  (0.3, 0.18, 0.22), (0.04, 0.032, 0.05), 80.0),
        Primitive("box", Trajectory("sinusoidal", (0.0, -0.25, -0.2),
                                    (0.1, 0.0, 0.14), phase=0.5),
                  (0.2, 0.28, 0.14), (0.8, 0.7, 0.9), 80.0),
    ])


def make_scene(name: str) -> SceneSpec:
    if name == "lego-like":
        return lego_like_scene()
    if name == "mutant-like":
        return mutant_like_scene()
    raise ArgumentError(f"unknown scene {name!r}; choose from {SCENE_NAMES}")


def default_capture(scene: str, frames: int, cameras: Optional[int],
                    evs: Optional[tuple], width: int, height: int) -> CaptureSpec:
    if scene == "lego-like":
        return CaptureSpec(n_cameras=cameras or 1, n_frames=frames,
                           evs=tuple(evs) if evs else (-3.0, -1.0, 1.0),
                           width=width, height=height, moving_camera=True)
    return CaptureSpec(n_cameras=cameras or 3, n_frames=frames,
                       evs=tuple(evs) if evs else (-1.0, 1.0, 3.0),
                       width=width, height=height, moving_camera=False,
                       azimuth_range=(-25.0, 25.0))


def _look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)):
    z = eye - target
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, eye
    return c2w


def arc_camera(capture: CaptureSpec, azimuth_deg: float) -> Camera:
    az = math.radians(azimuth_deg)
    el = math.radians(capture.elevation_deg)
    eye = capture.distance * np.array([math.sin(az) * math.cos(el),
                                       math.sin(el),
                                       math.cos(az) * math.cos(el)])
    f = 0.5 * capture.width / math.tan(math.radians(capture.fov_deg) / 2)
    return Camera(fx=f, fy=f, cx=capture.width / 2, cy=capture.height / 2,
                  c2w=_look_at(eye, np.zeros(3)),
                  width=capture.width, height=capture.height)


def ev_assignment(frame: int, cam: int, evs: tuple) -> float:
    """Exposure rotates over (frame, camera) so every EV recurs regularly."""
    return float(evs[(frame + cam) % len(evs)])


def scene_near_far(capture: CaptureSpec, aabb: np.ndarray):
    r = float(np.linalg.norm((aabb[1] - aabb[0]) / 2)) * 1.15
    return max(0.05, capture.distance - r), capture.distance + r


def gt_crf_apply(name: str, x: np.ndarray) -> np.ndarray:
    """Generator-side response curve in the log domain."""
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
    if name == "smoothstep":
        s = np.clip((x + 6.0) / 12.0, 0.0, 1.0)
        return s * s * (3.0 - 2.0 * s)
    raise ArgumentError(f"unknown ground-truth response curve {name!r}")


def render_gt(spec: SceneSpec, camera: Camera, t_cap: float, ev: float,
              near: float, far: float, n_samples: int = GT_SAMPLES,
              gt_crf: str = "sigmoid"):
    """Ray-march the analytic scene -> (ldr uint8, hdr float32)."""
    if not np.isfinite(ev):
        raise ArgumentError("exposure value must be finite")
    h, w = camera.height, camera.width
    pys, pxs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    o, d = camera_rays(camera, pxs.reshape(-1), pys.reshape(-1))
    depths, deltas = _stratum_samples(np.full(o.shape[0], near),
                                      np.full(o.shape[0], far), n_samples,
                                      None)
    pts = o[:, None, :] + depths[..., None] * d[:, None, :]
    radiance, sigma = eval_scene(spec, pts.reshape(-1, 3), t_cap)
    comp = _composite(radiance.reshape(-1, n_samples, 3),
                      sigma.reshape(-1, n_samples), deltas)
    hdr = comp["pixel"].reshape(h, w, 3)
    log_e = np.where(hdr > 0, np.log(np.maximum(hdr, 1e-300)), LOG_FLOOR)
    ldr = gt_crf_apply(gt_crf, log_e + ev * LN2)
    return quantize(ldr), hdr.astype(np.float32)


def generate_dataset(out_dir, scene: str = "lego-like", frames: int = 20,
                     cameras: Optional[int] = None,
                     evs: Optional[tuple] = None, width: int = 64,
                     height: int = 64, seed: int = 0,
                     gt_crf: str = "sigmoid",
                     n_gt_samples: int = GT_SAMPLES) -> dict:
    """Render a full dataset to out_dir and return its manifest."""
    spec = make_scene(scene)
    capture = default_capture(scene, frames, cameras, evs, width, height)
    near, far = scene_near_far(capture, spec.aabb)

    cams = []
    if capture.moving_camera:
        # one rig sweeping the arc: a pose per frame
        for i in range(capture.n_frames):
            a0, a1 = capture.azimuth_range
            frac = i / max(capture.n_frames - 1, 1)
            cams.append(arc_camera(capture, a0 + frac * (a1 - a0)))
    else:
        a0, a1 = capture.azimuth_range
        for k in range(capture.n_cameras):
            frac = k / max(capture.n_cameras - 1, 1)
            cams.append(arc_camera(capture, a0 + frac * (a1 - a0)))

    frames_meta, ldr_images, hdr_images = [], [], []
    j = 0
    for fi in range(capture.n_frames):
        t_cap = fi / max(capture.n_frames - 1, 1)
        rigs = [0] if capture.moving_camera else range(capture.n_cameras)
        for ci in rigs:
            cam_id = fi if capture.moving_camera else ci
            ev = ev_assignment(fi, ci, capture.evs)
            ldr, hdr = render_gt(spec, cams[cam_id], t_cap, ev, near, far,
                                 n_samples=n_gt_samples, gt_crf=gt_crf)
            frames_meta.append({
                "image_index": j, "camera_id": cam_id, "t_cap": t_cap,
                "ev": ev, "ldr_path": f"ldr/frame_{j:05d}.png",
                "hdr_path": f"hdr/frame_{j:05d}.pfm", "split": "train",
            })
            ldr_images.append(ldr)
            hdr_images.append(hdr)
            j += 1

    manifest = {
        "version": MANIFEST_VERSION,
        "scene": scene,
        "seed": seed,
        "gt_crf": gt_crf,
        "width": width,
        "height": height,
        "near": near,
        "far": far,
        "aabb": spec.aabb.tolist(),
        "evs": list(capture.evs),
        "n_rigs": capture.n_cameras,
        "cameras": [{
            "id": i, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height, "c2w": c.c2w.tolist(),
        } for i, c in enumerate(cams)],
        "frames": frames_meta,
    }
    write_dataset(manifest, ldr_images, hdr_images, out_dir)
    return manifest


def write_dataset(manifest: dict, ldr_images, hdr_images, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "ldr"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "hdr"), exist_ok=True)
    for frame, ldr, hdr in zip(manifest["frames"], ldr_images, hdr_images):
        write_png(os.path.join(out_dir, frame["ldr_path"]), ldr)
        if frame["hdr_path"] is not None:
            write_pfm(os.path.join(out_dir, frame["hdr_path"]), hdr)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


class Dataset:
    """Manifest plus lazily loaded images and per-frame cameras."""

    def __init__(self, root: str, manifest: dict):
        self.root = root
        self.manifest = manifest
        self.frames = manifest["frames"]
        self.aabb = np.asarray(manifest["aabb"], dtype=np.float64)
        self.near = float(manifest["near"])
        self.far = float(manifest["far"])
        self.width = int(manifest["width"])
        self.height = int(manifest["height"])
        self._cameras = [
            Camera(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                   c2w=np.asarray(c["c2w"]), width=c["width"],
                   height=c["height"])
            for c in manifest["cameras"]
        ]

    @property
    def n_images(self) -> int:
        return len(self.frames)

    def camera(self, j: int) -> Camera:
        return self._cameras[self.frames[j]["camera_id"]]

    def t_cap(self, j: int) -> float:
        return float(self.frames[j]["t_cap"])

    def gt_evs(self) -> Optional[np.ndarray]:
        evs = [f.get("ev") for f in self.frames]
        if any(e is None for e in evs):
            return None
        return np.asarray(evs, dtype=np.float64)

    def load_ldr(self, j: int) -> np.ndarray:
        """De-quantized LDR image in [0,1]."""
        return dequantize(read_png(
            os.path.join(self.root, self.frames[j]["ldr_path"])))

    def load_hdr(self, j: int) -> Optional[np.ndarray]:
        path = self.frames[j].get("hdr_path")
        if path is None:
            return None
        return read_pfm(os.path.join(self.root, path))

    def split_columns(self, split: str):
        """Pixel-column ranges: train gets left halves, eval the right."""
        half = self.width // 2
        if split == "full":
            return np.arange(self.width), np.arange(self.width)
        if split == "half":
            return np.arange(half), np.arange(half, self.width)
        raise ArgumentError(f"unknown split {split!r}")


def read_dataset(root: str) -> Dataset:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc
    for key in ("version", "frames", "cameras", "aabb", "near", "far"):
        if key not in manifest:
            raise DataError(f"{path}: manifest missing key {key!r}")
    idxs = [f["image_index"] for f in manifest["frames"]]
    if idxs != list(range(len(idxs))):
        raise DataError(f"{path}: image indices are not dense 0..M-1")
    for frame in manifest["frames"]:
        for field_name in ("ldr_path", "hdr_path"):
            rel = frame.get(field_name)
            if rel is None:
                continue
            full = os.path.join(root, rel)
            if not os.path.exists(full):
                raise DataError(f"{full}: referenced by manifest but missing")
    return Dataset(root, manifest)
