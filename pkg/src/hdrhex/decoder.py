"""Feature decoding: grid features + encoded (x, d, t) -> log-radiance, density.

The density branch is a small ReLU MLP over [D, enc(x), enc(t)] whose scalar
head passes through softplus, so sigma > 0 and is independent of the view
direction. The color branch consumes the density branch's last hidden layer
together with enc(d) and emits three linear outputs: per-channel
log-radiance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ParamTensor, SeededRng
from .errors import ArgumentError


@dataclass
class PosEncConfig:
    l_x: int = 6
    l_d: int = 4
    l_t: int = 4
    include_input: bool = True

    def out_dim(self, in_dim: int, l: int) -> int:
        return in_dim * ((1 if self.include_input else 0) + 2 * l)


def posenc(v: np.ndarray, l: int, include_input: bool = True) -> np.ndarray:
    """[v, sin(pi v), cos(pi v), sin(2 pi v), cos(2 pi v), ...] along last axis."""
    if l < 0:
        raise ArgumentError(f"frequency count must be >= 0, got {l}")
    v = np.asarray(v, dtype=np.float64)
    parts = [v] if include_input else []
    for k in range(l):
        arg = (2.0 ** k * np.pi) * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        return np.zeros(v.shape[:-1] + (0,))
    return np.concatenate(parts, axis=-1)


def posenc_backward(v: np.ndarray, l: int, d_out: np.ndarray,
                    include_input: bool = True) -> np.ndarray:
    """Chain dL/d(encoded) back to dL/dv."""
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    dv = np.zeros_like(v)
    off = 0
    if include_input:
        dv += d_out[..., :d]
        off = d
    for k in range(l):
        f = 2.0 ** k * np.pi
        arg = f * v
        dv += d_out[..., off:off + d] * f * np.cos(arg)
        dv -= d_out[..., off + d:off + 2 * d] * f * np.sin(arg)
        off += 2 * d
    return dv


class Mlp:
    """Dense net, ReLU hidden activations, linear output."""

    def __init__(self, widths, rng: SeededRng, name: str,
                 bias_scale: float = 0.0):
        if len(widths) < 2:
            raise ArgumentError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-scale, scale, size=(fan_in, fan_out))
            b = rng.uniform(-bias_scale, bias_scale, size=(fan_out,)) \
                if bias_scale > 0 else np.zeros(fan_out)
            self.weights.append(ParamTensor(w, f"{name}.w{i}"))
            self.biases.append(ParamTensor(b, f"{name}.b{i}"))

    def params(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def forward(self, x: np.ndarray, want_ctx: bool = False):
        """x (N, in) -> (N, out); caches layer inputs for backward."""
        h = np.asarray(x, dtype=np.float64)
        inputs = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w.values + b.values
            if i != last:
                h = np.maximum(h, 0.0)
        if want_ctx:
            return h, inputs
        return h

    def backward(self, ctx, d_out: np.ndarray) -> np.ndarray:
        """Accumulate weight/bias grads; return dL/d(input)."""
        inputs = ctx
        g = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            x = inputs[i]
            self.weights[i].grad += x.T @ g
            self.biases[i].grad += g.sum(axis=0)
            g = g @ self.weights[i].values.T
            if i > 0:
                # cached input of layer i is the post-ReLU activation; it is
                # positive exactly where the pre-activation was
                g = g * (inputs[i] > 0.0)
        return g


@dataclass
class RadianceSample:
    e_log: np.ndarray  # (3,) log-radiance per channel
    sigma: float       # density >= 0


class RadianceDecoder:
    """Maps (D, x, d, t) to per-point log-radiance and density."""

    def __init__(self, feature_dim: int, rng: SeededRng,
                 enc: PosEncConfig = None, hidden: int = 64):
        self.enc = enc or PosEncConfig()
        self.feature_dim = feature_dim
        self.hidden = hidden
        x_dim = self.enc.out_dim(3, self.enc.l_x)
        t_dim = self.enc.out_dim(1, self.enc.l_t)
        d_dim = self.enc.out_dim(3, self.enc.l_d)
        self.trunk = Mlp([feature_dim + x_dim + t_dim, hidden, hidden],
                         rng, "decoder.trunk")
        self.sigma_head = Mlp([hidden, 1], rng, "decoder.sigma")
        self.color_mlp = Mlp([hidden + d_dim, hidden, 3], rng, "decoder.color")

    def params(self):
        yield from self.trunk.params()
        yield from self.sigma_head.params()
        yield from self.color_mlp.params()

    def forward_batch(self, feats, pts, dirs, ts, want_ctx: bool = False):
        """(N,F),(N,3),(N,3),(N,) -> sigma (N,), e_log (N,3)."""
        enc_x = posenc(pts, self.enc.l_x, self.enc.include_input)
        enc_t = posenc(ts.reshape(-1, 1), self.enc.l_t, self.enc.include_input)
        enc_d = posenc(dirs, self.enc.l_d, self.enc.include_input)
        trunk_in = np.concatenate([feats, enc_x, enc_t], axis=1)
        h, trunk_ctx = self.trunk.forward(trunk_in, want_ctx=True)
        h = np.maximum(h, 0.0)  # trunk output feeds both heads post-ReLU
        raw_sigma, sig_ctx = self.sigma_head.forward(h, want_ctx=True)
        raw_sigma = raw_sigma[:, 0]
        sigma = _softplus(raw_sigma)
        color_in = np.concatenate([h, enc_d], axis=1)
        e_log, col_ctx = self.color_mlp.forward(color_in, want_ctx=True)
        if want_ctx:
            ctx = (pts, dirs, ts, trunk_ctx, sig_ctx, col_ctx, h, raw_sigma)
            return sigma, e_log, ctx
        return sigma, e_log

    def backward_batch(self, ctx, d_sigma: np.ndarray, d_e_log: np.ndarray,
                       want_input_grads: bool = False):
        """Accumulate weight grads; return dD, or (dD, dx, dd, dt)."""
        pts, dirs, ts, trunk_ctx, sig_ctx, col_ctx, h, raw_sigma = ctx
        d_raw = (d_sigma * _sigmoid(raw_sigma))[:, None]
        dh_sig = self.sigma_head.backward(sig_ctx, d_raw)
        d_color_in = self.color_mlp.backward(col_ctx, d_e_log)
        dh = dh_sig + d_color_in[:, :self.hidden]
        d_trunk_out = dh * (h > 0.0)
        d_trunk_in = self.trunk.backward(trunk_ctx, d_trunk_out)
        f = self.feature_dim
        d_feats = d_trunk_in[:, :f]
        if not want_input_grads:
            return d_feats
        x_dim = self.enc.out_dim(3, self.enc.l_x)
        d_enc_x = d_trunk_in[:, f:f + x_dim]
        d_enc_t = d_trunk_in[:, f + x_dim:]
        d_enc_d = d_color_in[:, self.hidden:]
        dx = posenc_backward(pts, self.enc.l_x, d_enc_x, self.enc.include_input)
        dt = posenc_backward(ts.reshape(-1, 1), self.enc.l_t, d_enc_t,
                             self.enc.include_input)[:, 0]
        dd = posenc_backward(dirs, self.enc.l_d, d_enc_d, self.enc.include_input)
        return d_feats, dx, dd, dt

    def density_only(self, feats, pts, ts) -> np.ndarray:
        """Density without evaluating the color branch (occupancy probes)."""
        enc_x = posenc(pts, self.enc.l_x, self.enc.include_input)
        enc_t = posenc(ts.reshape(-1, 1), self.enc.l_t, self.enc.include_input)
        trunk_in = np.concatenate([feats, enc_x, enc_t], axis=1)
        h = np.maximum(self.trunk.forward(trunk_in), 0.0)
        return _softplus(self.sigma_head.forward(h)[:, 0])

    def decode(self, feats: np.ndarray, x: np.ndarray, d: np.ndarray,
               t: float) -> RadianceSample:
        """Single-point decode; validates that d is unit length."""
        d = np.asarray(d, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ArgumentError(
                f"view direction must be unit length, |d|={np.linalg.norm(d)}")
        sigma, e_log = self.forward_batch(
            np.asarray(feats, dtype=np.float64).reshape(1, -1),
            np.asarray(x, dtype=np.float64).reshape(1, 3),
            d.reshape(1, 3), np.asarray([t], dtype=np.float64))
        return RadianceSample(e_log=e_log[0], sigma=float(sigma[0]))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
