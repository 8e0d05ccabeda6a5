"""Command-line entry point: gen-data, train, render, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/parse error, 3 numerical
failure. HDRHEX_THREADS caps numerical worker threads (applied before the
numerics stack loads). A JSON (or TOML, on Python 3.11+) config file can
supply any train flag; explicit flags win over the file, the file wins over
built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import os
import sys


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this package reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _apply_thread_cap() -> None:
    cap = os.environ.get("HDRHEX_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _parse_evs(text: str):
    try:
        evs = tuple(float(tok) for tok in text.split(","))
        if len(evs) < 2:
            raise ValueError("need at least two values")
        return evs
    except ValueError as exc:
        raise _Usage(f"bad EV list {text!r} ({exc}); "
                     f"expected e.g. --evs -3,-1,1") from exc


def _parse_res(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise _Usage(f"bad resolution {text!r}; expected e.g. --res 64x64") \
            from exc


class _Usage(Exception):
    pass


def build_parser(train_defaults: dict) -> argparse.ArgumentParser:
    parser = _Parser(prog="hdrhex",
                     description="Dynamic HDR radiance fields from "
                                 "multi-exposure LDR captures.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="render a synthetic "
                       "multi-exposure dataset", add_help=True)
    g.add_argument("--scene", choices=["lego-like", "mutant-like"],
                   default="lego-like", help="scene family (default: "
                   "lego-like)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--evs", default=None,
                   help="comma-separated exposure values in stops "
                        "(default: -3,-1,1 for lego-like, -1,1,3 for "
                        "mutant-like)")
    g.add_argument("--frames", type=int, default=20,
                   help="motion frames (default: 20)")
    g.add_argument("--cameras", type=int, default=None,
                   help="camera rigs (default: 1 for lego-like, 3 for "
                        "mutant-like)")
    g.add_argument("--res", default="64x64",
                   help="image size WxH (default: 64x64)")
    g.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    g.add_argument("--gt-crf", choices=["sigmoid", "smoothstep"],
                   default="sigmoid",
                   help="generator response curve; smoothstep stresses the "
                        "fixed-sigmoid assumption (default: sigmoid)")

    t = sub.add_parser("train", help="fit a model to a dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--config", default=None,
                   help="JSON/TOML file of train options (flags override)")
    t.add_argument("--quiet", action="store_true",
                   help="suppress progress lines (default: off)")
    _flag = {"steps": int, "batch_rays": int, "n_samples": int, "seed": int,
             "lr_grid": float, "lr_decoder": float, "lr_embed": float,
             "lr_exposure_mlp": float, "lr_crf": float, "w_tv": float,
             "lambda_u": float, "spatial_res_init": int,
             "spatial_res_final": int, "time_res_init": int,
             "time_res_final": int, "occupancy_every": int,
             "occupancy_res": int, "occupancy_time_res": int,
             "occupancy_tau": float, "channels": int, "hidden": int,
             "embed_dim": int, "exposure_hidden": int,
             "chunk_samples": int}
    for name, typ in _flag.items():
        t.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None,
                       dest=name,
                       help=f"{name} (default: {train_defaults[name]})")
    t.add_argument("--split", choices=["full", "half"], default=None,
                   help=f"training pixel split (default: "
                        f"{train_defaults['split']})")
    t.add_argument("--crf", choices=["sigmoid", "mlp"], default=None,
                   dest="crf_mode",
                   help=f"camera response function (default: "
                        f"{train_defaults['crf_mode']})")
    t.add_argument("--no-exposure-mlp", action="store_true",
                   help="learn one raw scalar per image instead of the "
                        "exposure network (default: off)")
    t.add_argument("--upsample-steps", default=None, dest="upsample_steps",
                   help=f"comma-separated upsample step indices (default: "
                        f"{','.join(map(str, train_defaults['upsample_steps']))})")
    t.add_argument("--no-stratified", action="store_true",
                   help="use deterministic midpoint ray samples during "
                        "training (default: off)")

    r = sub.add_parser("render", help="render an image from a checkpoint")
    r.add_argument("--ckpt", required=True, help="checkpoint file")
    r.add_argument("--camera-id", type=int, default=0,
                   help="camera index from the checkpoint (default: 0)")
    r.add_argument("--time", type=float, default=0.0,
                   help="normalized scene time in [0,1] (default: 0.0)")
    r.add_argument("--mode", choices=["ldr", "hdr", "tonemapped"],
                   default="ldr", help="output kind (default: ldr)")
    r.add_argument("--ev", type=float, default=None,
                   help="explicit exposure value in stops for LDR "
                        "(default: none)")
    r.add_argument("--image-index", type=int, default=None,
                   help="use this training image's learned exposure "
                        "(default: none)")
    r.add_argument("--out", required=True, help="output image path "
                   "(PNG for ldr/tonemapped, PFM for hdr)")
    r.add_argument("--n-samples", type=int, default=128,
                   help="samples per ray (default: 128)")
    r.add_argument("--mu", type=float, default=5000.0,
                   help="tone-mapping compression constant (default: 5000)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", choices=["half", "test"], default="half",
                   help="held-out views: right image halves or test frames "
                        "(default: half)")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--n-samples", type=int, default=128,
                   help="samples per ray (default: 128)")

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--component",
                   choices=["all", "hexplane", "decoder", "exposure",
                            "renderer"],
                   default="all", help="which probes to run (default: all)")
    c.add_argument("--seed", type=int, default=0, help="seed (default: 0)")

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    from dataclasses import asdict

    from .errors import ArgumentError, DataError, NumericalError
    from .trainer import TrainConfig

    train_defaults = asdict(TrainConfig())
    parser = build_parser(train_defaults)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train":
            return _cmd_train(args, train_defaults)
        if args.command == "render":
            return _cmd_render(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        raise _Usage(f"unknown command {args.command!r}")
    except (_Usage, ArgumentError, IndexError) as exc:
        print(f"hdrhex: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"hdrhex: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"hdrhex: numerical failure: {exc}", file=sys.stderr)
        return 3


def _cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset

    evs = _parse_evs(args.evs) if args.evs else None
    width, height = _parse_res(args.res)
    manifest = generate_dataset(args.out, scene=args.scene,
                                frames=args.frames, cameras=args.cameras,
                                evs=evs, width=width, height=height,
                                seed=args.seed, gt_crf=args.gt_crf)
    print(f"wrote {len(manifest['frames'])} frames "
          f"({manifest['n_rigs']} camera(s), EVs "
          f"{','.join(str(e) for e in manifest['evs'])}) to {args.out}")
    return 0


def _load_config_file(path) -> dict:
    from .errors import DataError

    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError as exc:
            raise DataError(f"{path}: TOML configs need Python >= 3.11; "
                            f"use JSON") from exc
        try:
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise DataError(f"{path}: {exc}") from exc
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc


def _cmd_train(args, train_defaults: dict) -> int:
    from .synthdata import read_dataset
    from .trainer import TrainConfig, fit

    merged = dict(train_defaults)
    if args.config:
        file_cfg = _load_config_file(args.config)
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise _Usage(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for name in merged:
        val = getattr(args, name, None)
        if val is not None and name != "upsample_steps":
            merged[name] = val
    if args.upsample_steps is not None:
        merged["upsample_steps"] = tuple(
            int(s) for s in str(args.upsample_steps).split(",") if s)
    if args.no_exposure_mlp:
        merged["use_exposure_mlp"] = False
    if args.no_stratified:
        merged["stratified"] = False
    merged["upsample_steps"] = tuple(merged["upsample_steps"])
    merged["ranks"] = tuple(merged["ranks"])
    config = TrainConfig(**merged)

    if not os.path.isdir(args.data):
        raise _Usage(f"dataset directory {args.data!r} does not exist")
    dataset = read_dataset(args.data)
    fit(dataset, config, out_dir=args.out, quiet=args.quiet)
    print(f"trained {config.steps} steps; checkpoint and log in {args.out}")
    return 0


def _cmd_render(args) -> int:
    import numpy as np

    from .images import write_pfm, write_png
    from .model import load_checkpoint
    from .renderer import Camera, render_image, tone_map
    from .synthdata import LN2

    if args.ev is not None and args.image_index is not None:
        raise _Usage("--ev and --image-index are mutually exclusive")
    model = load_checkpoint(args.ckpt)
    if not model.cameras:
        raise _Usage("checkpoint carries no cameras; cannot pick "
                     "--camera-id")
    if not 0 <= args.camera_id < len(model.cameras):
        raise _Usage(f"--camera-id {args.camera_id} out of range "
                     f"[0, {len(model.cameras)})")
    c = model.cameras[args.camera_id]
    camera = Camera(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                    c2w=np.asarray(c["c2w"]), width=c["width"],
                    height=c["height"])

    e_prime = None
    if args.mode == "ldr":
        if args.image_index is not None:
            e_prime = model.exposure.exposure_log(args.image_index)
        elif args.ev is not None:
            e_prime = args.ev * LN2 + (model.gauge_offset or 0.0)
        else:
            raise _Usage("LDR rendering needs --ev or --image-index")

    out = render_image(model.field, model.decoder, model.crf_mode, camera,
                       t_cap=args.time, near=model.near, far=model.far,
                       e_prime=e_prime, n_samples=args.n_samples)
    if args.mode == "hdr":
        write_pfm(args.out, out["hdr"])
    elif args.mode == "tonemapped":
        write_png(args.out, tone_map(out["hdr"], mu=args.mu))
    else:
        write_png(args.out, out["ldr"])
    print(f"wrote {args.mode} render to {args.out}")
    return 0


def evaluate_checkpoint(model, dataset, split: str = "half",
                        n_samples: int = 128) -> dict:
    """Held-out metrics: LDR PSNR/SSIM, gauge-aligned HDR PSNR, exposures."""
    import math

    import numpy as np

    from .metrics import exposure_report, psnr, ssim
    from .renderer import render_image, tone_map
    from .synthdata import LN2

    if split == "half":
        _, eval_cols = dataset.split_columns("half")
        image_ids = list(range(dataset.n_images))
    elif split == "test":
        eval_cols = None
        image_ids = [f["image_index"] for f in dataset.frames
                     if f.get("split") == "test"]
        if not image_ids:
            raise _Usage("dataset has no held-out test frames; "
                         "use --split half")
    else:
        raise _Usage(f"unknown split {split!r}")

    learned = model.exposure.log_exposures()
    gt_evs = dataset.gt_evs()
    gauge = model.gauge_offset
    if gauge is None and gt_evs is not None:
        gauge = float(np.mean(learned - gt_evs * LN2))

    ldr_psnrs, ldr_ssims, hdr_psnrs = [], [], []
    for j in image_ids:
        cols = eval_cols if eval_cols is not None \
            else np.arange(dataset.width)
        out = render_image(model.field, model.decoder, model.crf_mode,
                           dataset.camera(j), dataset.t_cap(j),
                           near=dataset.near, far=dataset.far,
                           e_prime=float(learned[j]), n_samples=n_samples)
        gt_ldr = dataset.load_ldr(j)[:, cols]
        ldr_psnrs.append(psnr(out["ldr"], gt_ldr))
        ldr_ssims.append(ssim(out["ldr"], gt_ldr))
        gt_hdr = dataset.load_hdr(j)
        if gt_hdr is not None:
            aligned_hdr = out["hdr"] * math.exp(gauge) if gauge is not None \
                else out["hdr"]
            hdr_psnrs.append(psnr(tone_map(aligned_hdr),
                                  tone_map(gt_hdr[:, cols].astype(np.float64))))

    exp_report = exposure_report(learned, gt_evs)

    def none_if_inf(x):
        return None if x is None or math.isinf(x) else x

    def finite_mean(values):
        finite = [v for v in values if math.isfinite(v)]
        return float(np.mean(finite)) if finite else None

    report = {
        "split": split,
        "n_images": len(image_ids),
        "ldr_psnr_mean": finite_mean(ldr_psnrs),
        "ldr_psnr_per_image": [none_if_inf(p) for p in ldr_psnrs],
        "ldr_ssim_mean": float(np.mean(ldr_ssims)) if ldr_ssims else None,
        "ldr_ssim_per_image": ldr_ssims,
        "hdr_psnr_mean": finite_mean(hdr_psnrs),
        "hdr_psnr_per_image": [none_if_inf(p) for p in hdr_psnrs],
        "gauge_offset": gauge,
        "exposure": exp_report.to_dict(),
    }
    return report


def _cmd_eval(args) -> int:
    from .metrics import ascii_histogram, exposure_report, \
        write_histogram_csv
    from .model import load_checkpoint
    from .synthdata import read_dataset

    model = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    report = evaluate_checkpoint(model, dataset, split=args.split,
                                 n_samples=args.n_samples)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    hist_path = os.path.splitext(args.out)[0] + ".hist.csv"
    exp = exposure_report(model.exposure.log_exposures(), dataset.gt_evs())
    write_histogram_csv(hist_path, exp)
    print(f"LDR PSNR {report['ldr_psnr_mean']} dB, "
          f"SSIM {report['ldr_ssim_mean']}, "
          f"HDR PSNR {report['hdr_psnr_mean']} dB")
    print(ascii_histogram(exp))
    print(f"report: {args.out}; histogram CSV: {hist_path}")
    return 0


def gradcheck_probes(component: str, seed: int) -> dict:
    """Worst finite-difference relative error per requested component."""
    import numpy as np

    from .decoder import PosEncConfig, RadianceDecoder
    from .diffcore import ParamTensor, SeededRng, grad_check
    from .exposure import CrfMode, ExposureTable, zero_point_loss
    from .hexplane import GridConfig, HexPlaneField
    from .renderer import make_bundle, render_backward, render_bundle

    results = {}
    want = lambda name: component in ("all", name)

    if want("hexplane"):
        rng = SeededRng(seed)
        cfg = GridConfig(spatial_res=4, time_res_init=3, time_res_final=3,
                         ranks=(2, 1, 1), channels=2, upsample_steps=())
        field = HexPlaneField([[-1, -1, -1], [1, 1, 1]], cfg, rng)
        pts = rng.uniform(-0.9, 0.9, (6, 3))
        ts = rng.uniform(0, 1, 6)
        w = rng.uniform(0.5, 1.5, (6, 2))

        def field_loss():
            out, ctx = field.query_batch(pts, ts, want_ctx=True)
            field.query_backward(ctx, w)
            return float(np.sum(out * w)) \
                + field.tv_loss(want_grad=True)

        results["hexplane"] = grad_check(field_loss, field.params())

    if want("decoder"):
        rng = SeededRng(seed + 1)
        dec = RadianceDecoder(2, rng, enc=PosEncConfig(l_x=2, l_d=1, l_t=1),
                              hidden=6)
        feats = ParamTensor(rng.uniform(0, 1, (3, 2)), "probe.feats")
        pts = ParamTensor(rng.uniform(-0.5, 0.5, (3, 3)), "probe.x")
        dirs = rng.normal(size=(3, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        dirs = ParamTensor(dirs, "probe.d")
        ts = ParamTensor(rng.uniform(0, 1, 3), "probe.t")
        wsig = rng.uniform(0.5, 1, 3)
        wcol = rng.uniform(0.5, 1, (3, 3))

        def dec_loss():
            sig, elog, ctx = dec.forward_batch(
                feats.values, pts.values, dirs.values, ts.values,
                want_ctx=True)
            df, dx, dd, dt = dec.backward_batch(ctx, wsig, wcol,
                                                want_input_grads=True)
            feats.grad += df
            pts.grad += dx
            dirs.grad += dd
            ts.grad += dt
            return float(np.sum(sig * wsig) + np.sum(elog * wcol))

        probes = list(dec.params()) + [feats, pts, dirs, ts]
        results["decoder"] = grad_check(dec_loss, probes)

    if want("exposure"):
        rng = SeededRng(seed + 2)
        table = ExposureTable(4, rng, embed_dim=3, hidden=5)
        table.embeddings.values[:] = rng.uniform(-0.4, 0.4,
                                                 table.embeddings.shape)
        crf = CrfMode("mlp", rng=rng, hidden=5)
        elog = rng.uniform(-1, 1, (4, 3))
        w = rng.uniform(0.5, 1.5, (4, 3))

        def exp_loss():
            ep, ectx = table.log_exposures(want_ctx=True)
            c, cctx = crf.apply(elog + ep[:, None], want_ctx=True)
            dx = crf.apply_backward(cctx, w)
            table.log_exposures_backward(ectx, dx.sum(axis=1))
            zp = zero_point_loss(crf, want_grad=True, grad_scale=0.1)
            return float(np.sum(c * w)) + 0.1 * zp

        probes = list(table.params()) + list(crf.params())
        results["exposure"] = grad_check(exp_loss, probes)

    if want("renderer"):
        rng = SeededRng(seed + 3)
        cfg = GridConfig(spatial_res=4, time_res_init=3, time_res_final=3,
                         ranks=(1, 1, 1), channels=2, upsample_steps=())
        field = HexPlaneField([[-1, -1, -1], [1, 1, 1]], cfg, rng)
        dec = RadianceDecoder(2, rng, enc=PosEncConfig(l_x=2, l_d=1, l_t=1),
                              hidden=6)
        table = ExposureTable(3, rng, embed_dim=3, hidden=5)
        table.embeddings.values[:] = rng.uniform(-0.3, 0.3,
                                                 table.embeddings.shape)
        crf = CrfMode("mlp", rng=rng, hidden=5)
        o = np.array([[0.0, 0.0, 3.0], [0.3, 0.2, 3.0]])
        d = np.array([[0.0, 0.0, -1.0], [-0.05, -0.05, -1.0]])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        img_idx = np.array([0, 2])
        gt = np.array([[0.3, 0.5, 0.4], [0.6, 0.2, 0.7]])

        def pipe_loss():
            ep, ectx = table.log_exposures(want_ctx=True)
            bundle = make_bundle(o, d, [0.3, 0.7], 1.0, 5.0,
                                 image_index=img_idx, aabb=field.aabb)
            out = render_bundle(field, dec, crf, bundle,
                                e_prime=ep[img_idx], n_samples=4,
                                want_ctx=True)
            resid = out["ldr"] - gt
            d_ep = render_backward(out["ctx"], 2.0 * resid / resid.size)
            table.log_exposures_backward(
                ectx, np.bincount(img_idx, weights=d_ep, minlength=3))
            zp = zero_point_loss(crf, want_grad=True, grad_scale=0.1)
            tv = field.tv_loss(want_grad=True, grad_scale=1e-2)
            return float(np.mean(resid ** 2)) + 0.1 * zp + 1e-2 * tv

        probes = list(field.params()) + list(dec.params()) \
            + list(table.params()) + list(crf.params())
        results["renderer"] = grad_check(pipe_loss, probes)

    return results


def _cmd_gradcheck(args) -> int:
    from .errors import NumericalError

    results = gradcheck_probes(args.component, args.seed)
    threshold = 1e-4
    failed = False
    for name, err in results.items():
        status = "ok" if err < threshold else "FAIL"
        print(f"{name:10s} max relative error {err:.3e}  [{status}]")
        failed |= err >= threshold
    if failed:
        raise NumericalError(f"gradient check exceeded {threshold}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
