"""Command-line front end: simulate | patches | train | denoise | eval.

Every subcommand is driven by a declarative JSON config (plus a few flag
overrides) and is byte-reproducible for a fixed seed.

Exit codes: 0 success, 2 configuration/validation error, 3 I/O error,
4 numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    CheckpointError,
    ConstantInputError,
    EmptyBackgroundError,
    EmptyMaskError,
    FormatError,
    NldenoiseError,
    ParameterError,
    TrainingError,
)
from .metrics import (
    MetricsRow,
    psnr,
    read_metrics_csv,
    report,
    ssim3d,
    write_report_csv,
    write_report_json,
)
from .network import ModelConfig, infer_volume
from .noise import (
    BinningConfig,
    background_lumpiness,
    classify_bin,
    cov,
    embed_scalar,
    fit_embed_stats,
    mask_mean,
    otsu_threshold,
    write_descriptor_manifest,
)
from .phantom import CountSimConfig, default_phantom_spec, fraction_filename, write_dataset_dir
from .training import PatchStore, TrainConfig, load_checkpoint, train_loop
from .volume import extract_patches, load_volume, save_volume

log = logging.getLogger("nldenoise")

DEFAULT_CONFIG = {
    "seed": 0,
    "phantoms": {"count": 4, "dims": [48, 48, 48], "voxel_size": [2.5, 2.5, 2.5]},
    "sim": {"fractions": [0.125, 0.25, 1.0], "psf_fwhm_mm": 4.0},
    "binning": {"cov_split": 0.3, "lump_split": 0.2, "histogram_bins": 256},
    "model": {},
    "train": {},
    "patches": {"fraction": 0.125, "patch_size": 16, "stride": 16, "train_phantoms": None},
}


def load_config(path, seed_override=None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config is not valid JSON: {exc}") from exc
        for key, val in user.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    if seed_override is not None:
        cfg["seed"] = seed_override
    return cfg


def _binning(cfg) -> BinningConfig:
    return BinningConfig(**cfg["binning"])


def cmd_simulate(cfg, out_dir) -> int:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ph = cfg["phantoms"]
    seed = int(cfg["seed"])
    for i in range(int(ph["count"])):
        spec = default_phantom_spec(
            seed + i, dims=tuple(ph["dims"]), voxel_size=tuple(ph["voxel_size"])
        )
        sim = CountSimConfig(
            fractions=tuple(cfg["sim"]["fractions"]),
            psf_fwhm_mm=cfg["sim"]["psf_fwhm_mm"],
            seed=seed + 100_000 + i,
        )
        write_dataset_dir(out_dir, spec, sim, phantom_id=f"{i:03d}")
    (out_dir / "dataset.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return 0


def build_patch_store(dataset_dir, cfg, phantom_ids=None):
    """Extract paired patches + descriptors from a simulated dataset.

    Returns (store, descriptor_records, excluded_records).
    """
    dataset_dir = Path(dataset_dir)
    pc = cfg["patches"]
    fraction = float(pc["fraction"])
    p, stride = int(pc["patch_size"]), int(pc["stride"])
    binning = _binning(cfg)
    if phantom_ids is None:
        phantom_ids = pc.get("train_phantoms")
    dirs = sorted(d for d in dataset_dir.iterdir() if d.is_dir() and d.name.startswith("phantom_"))
    if phantom_ids is not None:
        wanted = {f"phantom_{i}" for i in phantom_ids}
        dirs = [d for d in dirs if d.name in wanted]
    if not dirs:
        raise ParameterError(f"no phantom directories selected under {dataset_dir}")
    raw = []  # (volume_id, origin, low values, target values, thr, mean, count, cov, lump, bin)
    excluded = []
    for d in dirs:
        low = load_volume(d / fraction_filename(fraction))
        full = load_volume(d / "full.nvol")
        low_patches = extract_patches(low, p, stride)
        full_patches = extract_patches(full, p, stride)
        for lp, fp in zip(low_patches, full_patches):
            try:
                thr = otsu_threshold(lp.values, binning.histogram_bins)
                mean_counts, n_mask = mask_mean(lp, thr)
                c = cov(mean_counts)
                lump = background_lumpiness(lp, thr)
            except (ConstantInputError, EmptyMaskError, EmptyBackgroundError) as exc:
                excluded.append({"volume_id": d.name, "origin": list(lp.origin),
                                 "reason": type(exc).__name__})
                continue
            raw.append((d.name, lp.origin, lp.values, fp.values, thr, mean_counts, n_mask, c,
                        lump, classify_bin(c, lump, binning)))
    if len(raw) < 2:
        raise ParameterError("fewer than 2 usable patches; cannot fit embedding stats")
    stats = fit_embed_stats([r[7] for r in raw])
    records, inputs, targets, embeds, bins = [], [], [], [], []
    for volume_id, origin, low_vals, full_vals, thr, mean_counts, n_mask, c, lump, b in raw:
        s = embed_scalar(c, stats)
        records.append({
            "volume_id": volume_id, "origin": list(origin), "size": p,
            "otsu_threshold": thr, "mask_mean_counts": mean_counts, "cov": c,
            "lumpiness": lump, "bin": b.value, "embed_scalar": s,
        })
        inputs.append(low_vals / np.float32(fraction))
        targets.append(full_vals)
        embeds.append(s)
        bins.append(b.value)
    store = PatchStore(inputs, targets, embeds, bins, fraction, stats)
    return store, records, excluded


def cmd_patches(cfg, dataset_dir, out_dir) -> int:
    store, records, excluded = build_patch_store(dataset_dir, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store.save(out_dir)
    write_descriptor_manifest(out_dir / "descriptors.jsonl", records)
    bin_counts = {}
    for rec in records:
        bin_counts[rec["bin"]] = bin_counts.get(rec["bin"], 0) + 1
    manifest = {
        "n_patches": len(records),
        "bin_counts": bin_counts,
        "excluded": excluded,
        "fraction": store.fraction,
        "mu_logcov": store.stats.mu_logcov,
        "sigma_logcov": store.stats.sigma_logcov,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for rec in excluded:
        log.info("excluded patch %s %s: %s", rec["volume_id"], rec["origin"], rec["reason"])
    return 0


def cmd_train(cfg, store_dir, out_dir, use_nle=None, resume=None) -> int:
    store = PatchStore.load(store_dir)
    model_config = ModelConfig(**cfg["model"])
    train_kwargs = dict(cfg["train"])
    train_kwargs.setdefault("seed", int(cfg["seed"]))
    train_kwargs.setdefault("patch_size", int(cfg["patches"]["patch_size"]))
    if use_nle is not None:
        train_kwargs["use_nle"] = use_nle
    train_config = TrainConfig(**train_kwargs)
    if train_config.patch_size != store.inputs.shape[1]:
        raise ParameterError(
            f"config patch_size {train_config.patch_size} != store patch edge {store.inputs.shape[1]}"
        )
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    train_loop(store, model_config, train_config, out_dir=out_dir, resume_from=resume)
    return 0


def cmd_denoise(cfg, volume_path, checkpoint_dir, out_path, stride=None, fraction=1.0) -> int:
    params, meta = load_checkpoint(Path(checkpoint_dir))
    model_config = meta["model"]
    from .noise import EmbedStats

    stats = EmbedStats(meta["mu_logcov"], meta["sigma_logcov"])
    p = int(meta["train"].get("patch_size", cfg["patches"]["patch_size"]))
    if stride is None:
        stride = max(1, p // 2)
    use_nle = bool(meta["train"].get("use_nle", True))
    v = load_volume(volume_path)
    denoised = infer_volume(
        v, params, model_config, _binning(cfg), stats,
        patch_size=p, stride=int(stride), use_nle=use_nle,
        input_scale=1.0 / float(fraction), fallback_embed=meta.get("median_embed", 0.0),
    )
    save_volume(denoised, out_path)
    return 0


def cmd_eval(cfg, out_dir, from_csv=None, pairing=None) -> int:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if (from_csv is None) == (pairing is None):
        raise ParameterError("eval needs exactly one of --from-csv or --pairing")
    if from_csv is not None:
        rows = read_metrics_csv(from_csv)
    else:
        entries = json.loads(Path(pairing).read_text())
        if not isinstance(entries, list) or not entries:
            raise ParameterError("pairing manifest must be a non-empty JSON list")
        rows = []
        for e in entries:
            missing = {"image_id", "input", "pred_a", "pred_b", "ref"} - set(e)
            if missing:
                raise ParameterError(f"pairing entry missing fields: {sorted(missing)}")
            ref = load_volume(e["ref"])
            vols = {k: load_volume(e[k]) for k in ("input", "pred_a", "pred_b")}
            for k, v in vols.items():
                if v.dims != ref.dims:
                    raise ParameterError(f"{e['image_id']}: {k} dims {v.dims} != ref dims {ref.dims}")
            rows.append(MetricsRow(
                image_id=str(e["image_id"]),
                psnr_input=psnr(vols["input"], ref),
                psnr_a=psnr(vols["pred_a"], ref),
                psnr_b=psnr(vols["pred_b"], ref),
                ssim_input=ssim3d(vols["input"], ref),
                ssim_a=ssim3d(vols["pred_a"], ref),
                ssim_b=ssim3d(vols["pred_b"], ref),
            ))
    rep = report(rows)
    write_report_csv(out_dir / "report.csv", rows)
    write_report_json(out_dir / "report.json", rep)
    box_payload = {k: rep[k] for k in ("psnr_delta_box", "ssim_delta_box") if k in rep}
    (out_dir / "box_data.json").write_text(json.dumps(box_payload, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nldenoise")
    parser.add_argument("--config", type=str, default=None, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", type=str, default=None, help="output directory/file")
    parser.add_argument("--threads", type=int, default=None, help="numba thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="generate phantom datasets")

    p = sub.add_parser("patches", help="extract paired patches + noise descriptors")
    p.add_argument("dataset", help="dataset directory from `simulate`")

    p = sub.add_parser("train", help="train the denoising network")
    p.add_argument("store", help="patch store directory from `patches`")
    nle = p.add_mutually_exclusive_group()
    nle.add_argument("--use-nle", dest="use_nle", action="store_true", default=None)
    nle.add_argument("--no-nle", dest="use_nle", action="store_false")
    p.add_argument("--resume", type=str, default=None, help="checkpoint directory to resume from")

    p = sub.add_parser("denoise", help="denoise a volume with a checkpoint")
    p.add_argument("volume", help="input NVOL file")
    p.add_argument("checkpoint", help="checkpoint directory")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--fraction", type=float, default=1.0,
                   help="count fraction of the input (scales network input by 1/f)")

    p = sub.add_parser("eval", help="metrics report + paired statistics")
    p.add_argument("--from-csv", type=str, default=None, help="import a metrics table")
    p.add_argument("--pairing", type=str, default=None, help="pairing manifest JSON")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and kernels.HAVE_NUMBA:
        import numba

        numba.set_num_threads(min(max(1, args.threads), numba.config.NUMBA_NUM_THREADS))
    cfg = load_config(args.config, seed_override=args.seed)
    if args.out is None:
        raise ParameterError("--out is required")
    if args.command == "simulate":
        return cmd_simulate(cfg, args.out)
    if args.command == "patches":
        return cmd_patches(cfg, args.dataset, args.out)
    if args.command == "train":
        return cmd_train(cfg, args.store, args.out, use_nle=args.use_nle, resume=args.resume)
    if args.command == "denoise":
        return cmd_denoise(cfg, args.volume, args.checkpoint, args.out,
                           stride=args.stride, fraction=args.fraction)
    if args.command == "eval":
        return cmd_eval(cfg, args.out, from_csv=args.from_csv, pairing=args.pairing)
    raise ParameterError(f"unknown command {args.command}")


def main(argv=None) -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        sys.exit(run(argv))
    except TrainingError as exc:
        log.error("numerical failure: %s", exc)
        sys.exit(4)
    except (FormatError, CheckpointError, OSError) as exc:
        log.error("I/O error: %s", exc)
        sys.exit(3)
    except NldenoiseError as exc:
        log.error("configuration error: %s", exc)
        sys.exit(2)


if __name__ == "__main__":
    main()
