"""Model assembly and the shared checkpoint format.

A checkpoint is one file: a single-line JSON header (structure, shapes,
ranks, aabb, resolutions, cameras, bookkeeping) followed by a newline and
the concatenation of every parameter tensor as little-endian float64, in
header order.
"""
from __future__ import annotations

import json
from typing import Optional

import numpy as np

from .decoder import PosEncConfig, RadianceDecoder
from .diffcore import SeededRng
from .errors import DataError
from .exposure import CrfMode, ExposureTable
from .hexplane import GridConfig, HexPlaneField

CHECKPOINT_VERSION = 1


class HdrHexModel:
    """Field + decoder + exposure table + response function."""

    def __init__(self, field: HexPlaneField, decoder: RadianceDecoder,
                 exposure: ExposureTable, crf_mode: CrfMode,
                 near: float, far: float, cameras: Optional[list] = None,
                 gauge_offset: Optional[float] = None,
                 trained_steps: int = 0, build_spec: Optional[dict] = None):
        self.field = field
        self.decoder = decoder
        self.exposure = exposure
        self.crf_mode = crf_mode
        self.near = float(near)
        self.far = float(far)
        self.cameras = cameras or []
        self.gauge_offset = gauge_offset
        self.trained_steps = trained_steps
        self.build_spec = build_spec or {}

    def params(self):
        for group in self.param_groups().values():
            yield from group

    def param_groups(self) -> dict:
        groups = {
            "grid": list(self.field.params()),
            "decoder": list(self.decoder.params()),
            "embed": [self.exposure.embeddings],
            "exposure_mlp": list(self.exposure.mlp.params())
            if self.exposure.mlp is not None else [],
            "crf": list(self.crf_mode.params()),
        }
        return groups

    @staticmethod
    def build(spec: dict, seed: int) -> "HdrHexModel":
        """Construct a fresh model; identical spec+seed gives identical init."""
        rng = SeededRng(seed)
        grid = GridConfig(
            spatial_res=spec["spatial_res"],
            time_res_init=spec["time_res"],
            time_res_final=max(spec.get("time_res_final", spec["time_res"]),
                               spec["time_res"]),
            ranks=tuple(spec["ranks"]),
            channels=spec["channels"],
        )
        field = HexPlaneField(np.asarray(spec["aabb"]), grid, rng)
        enc = PosEncConfig(l_x=spec.get("l_x", 6), l_d=spec.get("l_d", 4),
                           l_t=spec.get("l_t", 4))
        decoder = RadianceDecoder(spec["channels"], rng, enc=enc,
                                  hidden=spec.get("hidden", 64))
        exposure = ExposureTable(spec["n_images"], rng,
                                 embed_dim=spec.get("embed_dim", 8),
                                 hidden=spec.get("exposure_hidden", 16),
                                 use_mlp=spec.get("use_exposure_mlp", True))
        crf_mode = CrfMode(variant=spec.get("crf_variant", "sigmoid"),
                           rng=rng, c0=spec.get("c0", 0.5),
                           lambda_u=spec.get("lambda_u", 0.1))
        return HdrHexModel(field, decoder, exposure, crf_mode,
                           near=spec.get("near", 0.1),
                           far=spec.get("far", 10.0),
                           cameras=spec.get("cameras"),
                           build_spec=dict(spec))


def save_checkpoint(path, model: HdrHexModel) -> None:
    tensors = list(model.params())
    spec = dict(model.build_spec)
    spec["spatial_res"] = model.field.spatial_res
    spec["time_res"] = model.field.time_res
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "spec": spec,
        "near": model.near,
        "far": model.far,
        "cameras": model.cameras,
        "gauge_offset": model.gauge_offset,
        "trained_steps": model.trained_steps,
        "tensors": [{"name": t.name, "shape": list(t.shape)}
                    for t in tensors],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for t in tensors:
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> HdrHexModel:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint header ({exc})") \
            from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version "
                        f"{header.get('format_version')}")
    spec = header["spec"]
    model = HdrHexModel.build(spec, seed=spec.get("seed", 0))
    model.near = float(header["near"])
    model.far = float(header["far"])
    model.cameras = header.get("cameras") or []
    model.gauge_offset = header.get("gauge_offset")
    model.trained_steps = header.get("trained_steps", 0)

    tensors = list(model.params())
    decls = header["tensors"]
    if len(decls) != len(tensors):
        raise DataError(f"{path}: checkpoint lists {len(decls)} tensors, "
                        f"model has {len(tensors)}")
    offset = 0
    for decl, tensor in zip(decls, tensors):
        if decl["name"] != tensor.name or \
                tuple(decl["shape"]) != tensor.shape:
            raise DataError(
                f"{path}: tensor mismatch: checkpoint has "
                f"{decl['name']}{decl['shape']}, model expects "
                f"{tensor.name}{list(tensor.shape)}")
        nbytes = int(np.prod(decl["shape"], dtype=np.int64)) * 8 \
            if decl["shape"] else 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: truncated checkpoint payload at "
                            f"{tensor.name}")
        tensor.values[...] = np.frombuffer(chunk, dtype="<f8") \
            .reshape(tensor.shape)
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes after "
                        f"last tensor")
    return model
