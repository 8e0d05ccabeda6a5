"""Optimization loop: batched ray loss, per-group LR decay, coarse-to-fine.

Each step draws random (image, pixel) pairs from the training split,
renders them through the LDR pipeline, and backpropagates the combined
objective

    total = mse + w_tv * tv + lambda_u * zero_point

through hand-derived backward passes into every parameter group. The time
and spatial grids grow at scheduled steps, and an emptiness grid is
refreshed periodically so samplers skip carved-out space.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field as dc_field, asdict
from typing import Optional

import numpy as np

from .diffcore import AdamState, SeededRng, adam_step, lr_schedule
from .errors import ArgumentError, NumericalError
from .exposure import write_exposure_csv, zero_point_loss
from .model import HdrHexModel, save_checkpoint
from .renderer import OccupancyGrid, make_bundle, render_backward, \
    render_bundle
from .synthdata import Dataset, LN2

LOG_NAME = "train_log.ndjson"
CKPT_NAME = "model.ckpt"
EXPOSURE_CSV = "exposures.csv"


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_rays: int = 1024
    lr_grid: float = 2e-2
    lr_decoder: float = 1e-3
    lr_embed: float = 2e-2
    lr_exposure_mlp: float = 1e-3
    lr_crf: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    w_tv: float = 1e-4
    lambda_u: float = 0.1
    spatial_res_init: int = 32
    spatial_res_final: int = 48
    time_res_init: int = 16
    time_res_final: int = 24
    upsample_steps: tuple = (1000, 2000)
    occupancy_every: int = 500
    occupancy_res: int = 32
    occupancy_time_res: int = 8
    occupancy_tau: float = 1e-3
    n_samples: int = 64
    ranks: tuple = (2, 2, 2)
    channels: int = 8
    hidden: int = 64
    embed_dim: int = 8
    exposure_hidden: int = 16
    use_exposure_mlp: bool = True
    crf_mode: str = "sigmoid"
    c0: float = 0.5
    split: str = "half"
    stratified: bool = True
    seed: int = 0
    chunk_samples: int = 65536

    def __post_init__(self):
        for name in ("lr_grid", "lr_decoder", "lr_embed", "lr_exposure_mlp",
                     "lr_crf"):
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be positive")
        # schedule entries must land inside the run; drop the rest so short
        # runs (e.g. --steps 10) keep working with default schedules
        self.upsample_steps = tuple(s for s in self.upsample_steps
                                    if 0 < s < self.steps)

    group_lr_names = {
        "grid": "lr_grid", "decoder": "lr_decoder", "embed": "lr_embed",
        "exposure_mlp": "lr_exposure_mlp", "crf": "lr_crf",
    }


@dataclass
class LossReport:
    step: int
    mse: float
    tv: float
    zero_point: float
    total: float
    psnr_batch: float
    lrs: dict

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["psnr_batch"]):
            d["psnr_batch"] = None
        return json.dumps(d, sort_keys=True)


def compose_total(mse: float, tv: float, zero_point: float, w_tv: float,
                  lambda_u: float) -> float:
    return mse + w_tv * tv + lambda_u * zero_point


def total_loss(pred: np.ndarray, gt: np.ndarray, model: HdrHexModel,
               config: TrainConfig, step: int = 0,
               lrs: Optional[dict] = None) -> LossReport:
    """Loss report for a rendered batch (no gradients)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.size == 0:
        raise ArgumentError("total_loss needs a non-empty batch")
    if pred.shape != gt.shape:
        raise ArgumentError(f"pred {pred.shape} and gt {gt.shape} differ")
    mse = float(np.mean((pred - gt) ** 2))
    tv = model.field.tv_loss()
    zp = zero_point_loss(model.crf_mode)
    total = compose_total(mse, tv, zp, config.w_tv, config.lambda_u)
    psnr = float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return LossReport(step=step, mse=mse, tv=tv, zero_point=zp, total=total,
                      psnr_batch=psnr, lrs=lrs or {})


class Trainer:
    """Owns the model, optimizer state, and sampling machinery for one run."""

    def __init__(self, dataset: Dataset, config: TrainConfig):
        self.dataset = dataset
        self.config = config
        self.rng = SeededRng(config.seed)

        spec = {
            "aabb": dataset.aabb.tolist(),
            "ranks": list(config.ranks),
            "channels": config.channels,
            "spatial_res": config.spatial_res_init,
            "time_res": config.time_res_init,
            "time_res_final": config.time_res_final,
            "hidden": config.hidden,
            "n_images": dataset.n_images,
            "embed_dim": config.embed_dim,
            "exposure_hidden": config.exposure_hidden,
            "use_exposure_mlp": config.use_exposure_mlp,
            "crf_variant": config.crf_mode,
            "c0": config.c0,
            "lambda_u": config.lambda_u,
            "near": dataset.near,
            "far": dataset.far,
            "seed": config.seed,
            "cameras": dataset.manifest["cameras"],
        }
        self.model = HdrHexModel.build(spec, seed=config.seed)
        self._init_optimizer()

        # preload supervision and camera geometry as flat arrays
        m = dataset.n_images
        self.images = np.stack([dataset.load_ldr(j) for j in range(m)])
        self.t_caps = np.array([dataset.t_cap(j) for j in range(m)])
        cams = [dataset.camera(j) for j in range(m)]
        self.cam_r = np.stack([c.c2w[:3, :3] for c in cams])
        self.cam_t = np.stack([c.c2w[:3, 3] for c in cams])
        self.cam_fx = np.array([c.fx for c in cams])
        self.cam_fy = np.array([c.fy for c in cams])
        self.cam_cx = np.array([c.cx for c in cams])
        self.cam_cy = np.array([c.cy for c in cams])

        self.train_cols, self.eval_cols = dataset.split_columns(config.split)
        self.occupancy: Optional[OccupancyGrid] = None
        self.step_index = 0
        self._upsample_plan = self._make_upsample_plan()

    def _init_optimizer(self):
        c = self.config
        self.opt = {}
        for group, params in self.model.param_groups().items():
            for p in params:
                self.opt[p.name] = (group, AdamState(
                    p, beta1=c.adam_beta1, beta2=c.adam_beta2,
                    eps=c.adam_eps))

    def _make_upsample_plan(self) -> dict:
        c = self.config
        plan = {}
        events = sorted(c.upsample_steps)
        k = len(events)
        for i, s in enumerate(events):
            frac = (i + 1) / k
            plan[s] = (round(c.spatial_res_init
                             + frac * (c.spatial_res_final
                                       - c.spatial_res_init)),
                       round(c.time_res_init
                             + frac * (c.time_res_final - c.time_res_init)))
        return plan

    def current_lrs(self) -> dict:
        c = self.config
        return {g: lr_schedule(self.step_index, max(c.steps, 1),
                               getattr(c, name))
                for g, name in TrainConfig.group_lr_names.items()}

    def rays_for_pixels(self, img_idx, pxs, pys):
        """Vectorized pixel-center rays for per-image cameras."""
        x = (pxs + 0.5 - self.cam_cx[img_idx]) / self.cam_fx[img_idx]
        y = -(pys + 0.5 - self.cam_cy[img_idx]) / self.cam_fy[img_idx]
        d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
        d = np.einsum("nij,nj->ni", self.cam_r[img_idx], d_cam)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return self.cam_t[img_idx], d

    def _refresh_occupancy(self):
        c = self.config
        grid = OccupancyGrid(self.model.field.aabb, res=c.occupancy_res,
                             time_res=c.occupancy_time_res,
                             tau=c.occupancy_tau)
        grid.update(self.model.field, self.model.decoder)
        self.occupancy = grid

    def _upsample(self, spatial, time_res):
        old_field = self.model.field
        self.model.field = old_field.upsample(spatial, time_res)
        # grid tensors were replaced wholesale: start their moments fresh
        self._init_optimizer()

    def train_step(self) -> LossReport:
        c = self.config
        model = self.model
        step = self.step_index
        if step in self._upsample_plan:
            self._upsample(*self._upsample_plan[step])
        if c.occupancy_every > 0 and step > 0 \
                and step % c.occupancy_every == 0:
            self._refresh_occupancy()
        lrs = self.current_lrs()

        b = c.batch_rays
        m = self.dataset.n_images
        img_idx = self.rng.integers(0, m, size=b)
        pxs = self.train_cols[self.rng.integers(0, len(self.train_cols),
                                                size=b)]
        pys = self.rng.integers(0, self.dataset.height, size=b)
        gt = self.images[img_idx, pys, pxs]

        o, d = self.rays_for_pixels(img_idx, pxs, pys)
        eprimes, exp_ctx = model.exposure.log_exposures(want_ctx=True)
        d_eprime_images = np.zeros(m)

        sq_err_sum = 0.0
        chunk = max(1, c.chunk_samples // c.n_samples)
        denom = 3.0 * b
        for lo in range(0, b, chunk):
            hi = min(lo + chunk, b)
            sl = slice(lo, hi)
            bundle = make_bundle(o[sl], d[sl], self.t_caps[img_idx[sl]],
                                 self.dataset.near, self.dataset.far,
                                 image_index=img_idx[sl],
                                 aabb=model.field.aabb)
            out = render_bundle(model.field, model.decoder, model.crf_mode,
                                bundle, e_prime=eprimes[img_idx[sl]],
                                n_samples=c.n_samples, rng=self.rng,
                                stratified=c.stratified,
                                occupancy=self.occupancy, want_ctx=True)
            resid = out["ldr"] - gt[sl]
            sq_err_sum += float(np.sum(resid * resid))
            d_eprime_ray = render_backward(out["ctx"], 2.0 * resid / denom)
            d_eprime_images += np.bincount(img_idx[sl],
                                           weights=d_eprime_ray, minlength=m)

        model.exposure.log_exposures_backward(exp_ctx, d_eprime_images)
        mse = sq_err_sum / denom
        tv = model.field.tv_loss(want_grad=True, grad_scale=c.w_tv)
        zp = zero_point_loss(model.crf_mode, want_grad=True,
                             grad_scale=c.lambda_u)
        total = compose_total(mse, tv, zp, c.w_tv, c.lambda_u)
        if not math.isfinite(total):
            raise NumericalError(self._first_nonfinite(mse, tv, zp))

        for group, params in model.param_groups().items():
            for p in params:
                adam_step(p, self.opt[p.name][1], lrs[group])

        psnr = float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)
        self.step_index += 1
        return LossReport(step=step, mse=mse, tv=tv, zero_point=zp,
                          total=total, psnr_batch=psnr, lrs=lrs)

    def _first_nonfinite(self, mse, tv, zp) -> str:
        for name, val in (("mse", mse), ("tv", tv), ("zero_point", zp)):
            if not math.isfinite(val):
                return f"step {self.step_index}: loss term {name} " \
                       f"is non-finite"
        for p in self.model.params():
            if not np.all(np.isfinite(p.values)):
                return f"step {self.step_index}: first non-finite tensor: " \
                       f"{p.name}"
        return f"step {self.step_index}: non-finite loss"

    def finalize(self) -> None:
        """Estimate the gauge constant when ground-truth EVs exist."""
        gt_evs = self.dataset.gt_evs()
        if gt_evs is not None:
            learned = self.model.exposure.log_exposures()
            self.model.gauge_offset = float(np.mean(learned - gt_evs * LN2))
        self.model.trained_steps = self.step_index


def fit(dataset: Dataset, config: TrainConfig,
        out_dir: Optional[str] = None, quiet: bool = False):
    """Run the full optimization; returns (model, loss reports).

    With out_dir set, streams the ndjson loss log and writes the final
    checkpoint and the learned-exposure CSV there.
    """
    trainer = Trainer(dataset, config)
    reports = []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, LOG_NAME), "w")
    t0 = time.perf_counter()
    try:
        for step in range(config.steps):
            report = trainer.train_step()
            reports.append(report)
            if log_fh is not None:
                log_fh.write(report.to_json() + "\n")
            if not quiet and (step % 200 == 0 or step == config.steps - 1):
                print(f"step {step:5d}  mse {report.mse:.6f}  "
                      f"tv {report.tv:.6f}  zp {report.zero_point:.6f}  "
                      f"psnr {report.psnr_batch:6.2f}  "
                      f"[{time.perf_counter() - t0:6.1f}s]", flush=True)
    finally:
        if log_fh is not None:
            log_fh.close()
    trainer.finalize()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, CKPT_NAME), trainer.model)
        write_exposure_csv(os.path.join(out_dir, EXPOSURE_CSV),
                           trainer.model.exposure.log_exposures(),
                           dataset.gt_evs())
    return trainer.model, reports
