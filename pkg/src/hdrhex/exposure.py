"""Per-image exposure learning and the camera response function.

Each training image j owns an embedding row; a small shared network maps the
row to the image's log-exposure e'_j. The response function that turns
log-radiance-plus-log-exposure into a display value is a fixed sigmoid by
default; the trainable-MLP variant exists for the ablation and is anchored by
a zero-point penalty |g(0) - c0|.
"""
from __future__ import annotations

import csv
from typing import Optional

import numpy as np

from .decoder import Mlp, _sigmoid
from .diffcore import ParamTensor, SeededRng
from .errors import ArgumentError

CRF_CLAMP = 40.0


class ExposureTable:
    """Embeddings (one row per image) plus the shared exposure network.

    With ``use_mlp=False`` the table degenerates to one directly learned
    scalar per image (the ablation path): embeddings have width 1 and are
    read out as-is.
    """

    def __init__(self, n_images: int, rng: SeededRng, embed_dim: int = 8,
                 hidden: int = 16, use_mlp: bool = True):
        self.n_images = n_images
        self.use_mlp = use_mlp
        dim = embed_dim if use_mlp else 1
        self.embed_dim = dim
        self.embeddings = ParamTensor(np.zeros((n_images, dim)),
                                      "exposure.embeddings")
        self.mlp = Mlp([dim, hidden, hidden, 1], rng, "exposure.mlp") \
            if use_mlp else None

    def params(self):
        yield self.embeddings
        if self.mlp is not None:
            yield from self.mlp.params()

    def log_exposures(self, want_ctx: bool = False):
        """e' for every image index -> (n_images,)."""
        if self.mlp is None:
            out = self.embeddings.values[:, 0].copy()
            ctx = None
        else:
            out2, ctx = self.mlp.forward(self.embeddings.values, want_ctx=True)
            out = out2[:, 0]
        if want_ctx:
            return out, ctx
        return out

    def log_exposures_backward(self, ctx, d_eprime: np.ndarray) -> None:
        if self.mlp is None:
            self.embeddings.grad[:, 0] += d_eprime
        else:
            d_embed = self.mlp.backward(ctx, d_eprime[:, None])
            self.embeddings.grad += d_embed

    def exposure_log(self, j: int) -> float:
        """Log-exposure e'_j of one image."""
        if not 0 <= j < self.n_images:
            raise IndexError(f"image index {j} out of range "
                             f"[0, {self.n_images})")
        return float(self.log_exposures()[j])


class CrfMode:
    """Camera response: fixed sigmoid, or sigmoid-bounded trainable MLP."""

    FIXED_SIGMOID = "sigmoid"
    TRAINABLE_MLP = "mlp"

    def __init__(self, variant: str = FIXED_SIGMOID,
                 rng: Optional[SeededRng] = None, hidden: int = 16,
                 c0: float = 0.5, lambda_u: float = 0.1):
        if variant not in (self.FIXED_SIGMOID, self.TRAINABLE_MLP):
            raise ArgumentError(f"unknown CRF variant {variant!r}")
        self.variant = variant
        self.c0 = float(c0)
        self.lambda_u = float(lambda_u)
        self.crf_mlp = None
        if variant == self.TRAINABLE_MLP:
            if rng is None:
                raise ArgumentError("trainable CRF needs an rng for init")
            # nonzero bias init so g(0) starts away from its fixed point
            self.crf_mlp = Mlp([1, hidden, hidden, 1], rng, "crf.mlp",
                               bias_scale=0.3)

    def params(self):
        if self.crf_mlp is not None:
            yield from self.crf_mlp.params()

    def apply(self, x: np.ndarray, want_ctx: bool = False):
        """Response value in (0,1) for log-domain input of any shape."""
        x = np.asarray(x, dtype=np.float64)
        xc = np.clip(x, -CRF_CLAMP, CRF_CLAMP)
        inner_ctx = None
        if self.crf_mlp is None:
            z = xc
        else:
            flat = xc.reshape(-1, 1)
            z2, inner_ctx = self.crf_mlp.forward(flat, want_ctx=True)
            z = z2[:, 0].reshape(x.shape)
        out = _sigmoid(z)
        if want_ctx:
            return out, (x, xc, z, out, inner_ctx)
        return out

    def apply_backward(self, ctx, d_out: np.ndarray) -> np.ndarray:
        """Accumulate CRF-MLP grads (if any); return dL/dx."""
        x, xc, z, out, inner_ctx = ctx
        dz = d_out * out * (1.0 - out)
        if self.crf_mlp is None:
            dx = dz
        else:
            d_flat = self.crf_mlp.backward(inner_ctx, dz.reshape(-1, 1))
            dx = d_flat[:, 0].reshape(x.shape)
        # clamp gate: no gradient where the input was clipped
        return dx * ((x > -CRF_CLAMP) & (x < CRF_CLAMP))


def crf(mode: CrfMode, x) -> np.ndarray:
    return mode.apply(x)


def ldr_color(mode: CrfMode, e_log: np.ndarray, e_prime: float) -> np.ndarray:
    """Display color per channel: g(E' + e')."""
    e_log = np.asarray(e_log, dtype=np.float64)
    if not (np.all(np.isfinite(e_log)) and np.isfinite(e_prime)):
        raise ArgumentError("ldr_color inputs must be finite")
    return mode.apply(e_log + e_prime)


def zero_point_loss(mode: CrfMode, want_grad: bool = False,
                    grad_scale: float = 1.0) -> float:
    """|g(0) - c0|; identically zero for the fixed sigmoid."""
    if mode.crf_mlp is None:
        return 0.0
    g0, ctx = mode.apply(np.zeros(1), want_ctx=True)
    dev = float(g0[0]) - mode.c0
    if want_grad and dev != 0.0:
        mode.apply_backward(ctx, np.array([np.sign(dev) * grad_scale]))
    return abs(dev)


def write_exposure_csv(path, learned: np.ndarray,
                       gt_ev: Optional[np.ndarray] = None) -> None:
    """Rows of image_index, e_prime, and ground-truth EV when known."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_index", "e_prime", "gt_ev"])
        for j, e in enumerate(learned):
            gt = "" if gt_ev is None else repr(float(gt_ev[j]))
            writer.writerow([j, repr(float(e)), gt])


def read_exposure_csv(path):
    """Inverse of write_exposure_csv -> (learned, gt_ev or None)."""
    learned, gts = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            learned.append(float(row[1]))
            gts.append(float(row[2]) if row[2] != "" else None)
    gt = None if any(g is None for g in gts) or not gts \
        else np.array(gts, dtype=np.float64)
    return np.array(learned, dtype=np.float64), gt
