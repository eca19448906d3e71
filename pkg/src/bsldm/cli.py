"""Command-line entry point: ``bsldm <command> [options]``.

Commands: prepare, train, sample, evaluate, ablate, psd. Every command reads
the same config (``--config``, ``--profile``, ``--set section.key=value``).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import conditional_ldm, vq_compressor
from .config import ExperimentConfig, load_config
from .data_pipeline import (
    PreprocessConfig, _to_unit, bone_image, discover_pairs, generate_synthetic_pairs, jsrt_to_negative,
    load_blacklist, load_split, preprocess, read_image, read_manifest, read_processed, split_dataset,
    write_manifest, write_png16,
)
from .metrics import evaluate_set, make_extractor, psd_profile
from .sampler import SamplerTrace, ThresholdPolicy, sample_soft_tissue
from .schedules import OffsetNoiseConfig, make_cosine_schedule

logger = logging.getLogger("bsldm")


class CommandError(Exception):
    """User-facing failure; message is printed and the exit code is nonzero."""


# ------------------------------------------------------------------ layout


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    data = property(lambda self: self.root / "data")
    manifest = property(lambda self: self.root / "data" / "manifest.csv")
    data_config = property(lambda self: self.root / "data" / "data_config.json")
    checkpoints = property(lambda self: self.root / "checkpoints")
    logs = property(lambda self: self.root / "logs")

    def vqgan_ckpt(self):
        return self.checkpoints / "vqgan.pt"

    def ldm_ckpt(self, tag="main"):
        return self.checkpoints / ("ldm.pt" if tag == "main" else f"ldm_{tag}.pt")


def preprocess_config(cfg: ExperimentConfig) -> PreprocessConfig:
    d = cfg.data
    return PreprocessConfig(target_size=d.size, clahe=d.clahe, clip_limit=d.clip_limit,
                            tile_grid=d.tile_grid, normalization=d.normalization)


def threshold_policy(cfg: ExperimentConfig) -> ThresholdPolicy:
    s = cfg.sampler
    return ThresholdPolicy(kind=s.kind, omega=s.omega, intercept=s.intercept, percentile=s.percentile)


def schedule_for(cfg: ExperimentConfig):
    s = cfg.schedule
    return make_cosine_schedule(s.T, s.beta_min, s.beta_max)


# ------------------------------------------------------------------ prepare


def cmd_prepare(cfg: ExperimentConfig, force: bool = False) -> str:
    """Write processed PNGs and ``manifest.csv``; no-op when already up to date."""
    lay = Layout(cfg.output_dir)
    fp = cfg.data_fingerprint()
    if lay.manifest.exists():
        rows = read_manifest(lay.manifest)
        old = {r["fingerprint"] for r in rows}
        if old == {fp}:
            logger.info("dataset up to date (%d pairs, fingerprint %s)", len(rows), fp)
            return "up to date"
        if not force:
            raise CommandError(f"{lay.manifest} was prepared with a different config; rerun with --force to overwrite")
    pcfg = preprocess_config(cfg)
    items = []
    if cfg.data.synthetic > 0:
        for p in generate_synthetic_pairs(cfg.data.synthetic, cfg.data.size, cfg.data.synthetic_seed):
            items.append((p.id, preprocess(p.cxr, pcfg), preprocess(p.soft_tissue, pcfg), p.bone))
    else:
        if not cfg.data.raw_dir:
            raise CommandError("no input data: set data.raw_dir or use --synthetic N")
        try:
            found = discover_pairs(cfg.data.raw_dir, load_blacklist(cfg.data.blacklist or None))
        except (FileNotFoundError, ValueError) as exc:
            raise CommandError(str(exc)) from exc
        for pid, cxr_path, tis_path in found:
            cxr_raw, tis_raw = read_image(cxr_path), read_image(tis_path)
            if cfg.data.jsrt:
                cxr_raw = jsrt_to_negative(_to_unit(cxr_raw), cfg.data.jsrt_gamma)
                tis_raw = jsrt_to_negative(_to_unit(tis_raw), cfg.data.jsrt_gamma)
            cxr, tis = preprocess(cxr_raw, pcfg), preprocess(tis_raw, pcfg)
            items.append((pid, cxr, tis, bone_image((cxr + 1) / 2, (tis + 1) / 2)))
    if not items:
        raise CommandError("no image pairs found")
    splits = split_dataset([i[0] for i in items], cfg.data.split_ratios, cfg.data.split_seed)
    rows = []
    for pid, cxr, tis, bone in items:
        rel = {k: f"{k}/{pid}.png" for k in ("cxr", "tissue", "bone")}
        write_png16(lay.data / rel["cxr"], cxr)
        write_png16(lay.data / rel["tissue"], tis)
        write_png16(lay.data / rel["bone"], bone, value_range=(0.0, 1.0))
        rows.append({"id": pid, "split": splits[pid], **rel, "fingerprint": fp})
    write_manifest(lay.manifest, rows)
    with open(lay.data_config, "w") as fh:
        json.dump(dataclasses.asdict(cfg.data), fh, indent=2)
    counts = {s: sum(r["split"] == s for r in rows) for s in ("train", "val", "test")}
    logger.info("prepared %d pairs %s", len(rows), counts)
    return "prepared"


def adopt_prepared_data(cfg: ExperimentConfig, overrides=()) -> None:
    """Take the data section from the prepared dataset, except keys overridden explicitly."""
    path = Layout(cfg.output_dir).data_config
    if not path.exists():
        return
    with open(path) as fh:
        stored = json.load(fh)
    for k, v in stored.items():
        if f"data.{k}" not in overrides:
            cfg.set(f"data.{k}", v)


def _require_manifest(lay: Layout, cfg: ExperimentConfig):
    if not lay.manifest.exists():
        raise CommandError(f"no dataset manifest at {lay.manifest}; run `bsldm prepare` first")
    rows = read_manifest(lay.manifest)
    if {r["fingerprint"] for r in rows} != {cfg.data_fingerprint()}:
        raise CommandError("dataset manifest fingerprint does not match the current config; rerun prepare")


def _stack(pairs, attr):
    return np.stack([getattr(p, attr) for p in pairs]).astype(np.float32)


# ------------------------------------------------------------------ train


def load_compressor(cfg: ExperimentConfig):
    path = Layout(cfg.output_dir).vqgan_ckpt()
    if not path.exists():
        raise CommandError(f"missing compressor checkpoint {path}; run `bsldm train --stage vqgan` first")
    model, payload = vq_compressor.load_checkpoint(path)
    if payload["extra"].get("fingerprint") != cfg.compressor_fingerprint():
        raise CommandError(f"{path} does not match the current compressor config (fingerprint mismatch)")
    return model


def train_compressor(cfg: ExperimentConfig, epochs=None):
    lay = Layout(cfg.output_dir)
    _require_manifest(lay, cfg)
    epochs = cfg.train.vqgan_epochs if epochs is None else epochs
    ckpt = lay.vqgan_ckpt()
    if ckpt.exists():
        _, payload = vq_compressor.load_checkpoint(ckpt)
        if payload["extra"].get("fingerprint") != cfg.compressor_fingerprint():
            raise CommandError(f"{ckpt} belongs to a different config; remove it or change output_dir")
        if payload["epoch"] >= epochs and payload["extra"].get("complete"):
            logger.info("compressor already trained for %d epochs", payload["epoch"])
            return vq_compressor.load_checkpoint(ckpt)[0]
    train = load_split(lay.manifest, "train")
    images = np.concatenate([_stack(train, "cxr"), _stack(train, "soft_tissue")])
    lay.logs.mkdir(parents=True, exist_ok=True)
    model, _ = vq_compressor.train_vqgan(
        images, cfg.compressor, epochs, seed=cfg.train.seed, checkpoint_path=ckpt,
        log_path=lay.logs / "vqgan.csv", extra={"fingerprint": cfg.compressor_fingerprint()})
    return model


def train_estimator(cfg: ExperimentConfig, epochs=None, tag="main"):
    lay = Layout(cfg.output_dir)
    _require_manifest(lay, cfg)
    compressor = load_compressor(cfg)
    epochs = cfg.train.ldm_epochs if epochs is None else epochs
    train = load_split(lay.manifest, "train")
    with torch.no_grad():
        cond = compressor.to_latent(torch.from_numpy(_stack(train, "cxr"))[:, None])
        z0 = compressor.to_latent(torch.from_numpy(_stack(train, "soft_tissue"))[:, None])
    ckpt = lay.ldm_ckpt(tag)
    fp = cfg.ldm_fingerprint()
    if ckpt.exists():
        payload = torch.load(ckpt, map_location="cpu", weights_only=False)
        if payload["extra"].get("fingerprint") != fp:
            raise CommandError(f"{ckpt} belongs to a different config; remove it or change output_dir")
    lay.logs.mkdir(parents=True, exist_ok=True)
    log_name = "ldm.csv" if tag == "main" else f"ldm_{tag}.csv"
    cfg_est = cfg.estimator
    if cfg_est.latent_size != z0.shape[-1]:
        raise CommandError(f"estimator.latent_size={cfg_est.latent_size} but latents are {z0.shape[-1]} wide")
    return conditional_ldm.train_ldm(
        z0, cond, schedule_for(cfg), OffsetNoiseConfig(cfg.schedule.offset_lambda), cfg_est, epochs,
        seed=cfg.train.seed, checkpoint_path=ckpt, log_path=lay.logs / log_name, extra={"fingerprint": fp})


def cmd_train(cfg: ExperimentConfig, stage: str, epochs=None):
    if stage == "vqgan":
        train_compressor(cfg, epochs)
    elif stage == "ldm":
        if not Layout(cfg.output_dir).vqgan_ckpt().exists():
            raise CommandError("stage ldm requires a trained compressor; run `bsldm train --stage vqgan` first")
        train_estimator(cfg, epochs)
    else:
        raise CommandError(f"unknown stage {stage!r}")


# ------------------------------------------------------------------ sample


def load_estimator(cfg: ExperimentConfig, tag="main"):
    path = Layout(cfg.output_dir).ldm_ckpt(tag)
    if not path.exists():
        raise CommandError(f"missing diffusion checkpoint {path}; run `bsldm train --stage ldm` first")
    model, payload = conditional_ldm.load_checkpoint(path, use_ema=True)
    schedule = schedule_for(cfg)
    if payload["schedule_fingerprint"] != schedule.fingerprint():
        raise CommandError(f"{path} was trained with a different noise schedule than the config")
    if payload["extra"].get("fingerprint") != cfg.ldm_fingerprint():
        raise CommandError(f"{path} does not match the current config (fingerprint mismatch)")
    return model, schedule


def cmd_sample(cfg: ExperimentConfig, inputs, out_dir, seed=None, trace_path=None, raw=False, tag="main"):
    """Write one soft-tissue PNG per input radiograph, mirroring filenames."""
    compressor = load_compressor(cfg)
    estimator, schedule = load_estimator(cfg, tag)
    paths = [Path(p) for p in inputs]
    if not paths:
        raise CommandError("no input images")
    pcfg = preprocess_config(cfg)
    imgs = []
    for p in paths:
        imgs.append(preprocess(read_image(p), pcfg) if raw else read_processed(p))
    x = np.stack(imgs)
    if x.shape[-1] != cfg.data.size or x.shape[-2] != cfg.data.size:
        raise CommandError(f"inputs are {x.shape[-2]}x{x.shape[-1]}, config expects {cfg.data.size}; use --raw to resize")
    seed = cfg.sampler.seed if seed is None else seed
    trace = SamplerTrace() if trace_path else None
    out = sample_soft_tissue(x, compressor, estimator, schedule, threshold_policy(cfg), seed=seed,
                             trace=trace, batch_size=max(cfg.sampler.batch_size, len(x) if trace else 1))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p, img in zip(paths, out):
        write_png16(out_dir / p.name, img)
    if trace is not None:
        trace.write_csv(trace_path)
    return [out_dir / p.name for p in paths]


# ------------------------------------------------------------------ evaluate


def _extractor(cfg: ExperimentConfig):
    try:
        return make_extractor(cfg.evaluate.extractor)
    except RuntimeError as exc:
        raise CommandError(str(exc)) from exc


def cmd_evaluate(cfg: ExperimentConfig, pred_dir, out_dir=None, split="test", manifest=None):
    """Per-image CSV and mean ± std JSON for predictions named ``<id>.png``."""
    manifest = Path(manifest or Layout(cfg.output_dir).manifest)
    if not manifest.exists():
        raise CommandError(f"ground-truth manifest {manifest} not found")
    pred_dir = Path(pred_dir)
    truth = {p.id: p for p in load_split(manifest, split)}
    preds = {p.stem: p for p in pred_dir.glob("*.png")}
    missing = sorted(set(truth) - set(preds))
    extra = sorted(set(preds) - set(truth))
    if missing or extra:
        raise CommandError("prediction/ground-truth mismatch: "
                           + (f"missing predictions {missing} " if missing else "")
                           + (f"unexpected files {extra}" if extra else ""))
    ids = sorted(truth)
    targets = [(truth[i].soft_tissue + 1) / 2 for i in ids]
    bones = [truth[i].bone if truth[i].bone is not None else bone_image((truth[i].cxr + 1) / 2, t)
             for i, t in zip(ids, targets)]
    predictions = [(read_processed(preds[i]) + 1) / 2 for i in ids]
    report = evaluate_set(ids, targets, predictions, bones, _extractor(cfg))
    out_dir = Path(out_dir or pred_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "metrics.csv")
    report.write_json(out_dir / "summary.json")
    return report


# ------------------------------------------------------------------ ablate / sweep


ABLATION_GRID = [(offset, kind) for offset in ("off", "on") for kind in ("none", "static", "dynamic", "temporal")]
ABLATION_FIELDS = ["offset_noise", "thresholding", "bsr", "mse", "psnr", "lpips", "luminance_error", "formatted"]


def _luminance_error(pred_dir, manifest, split="test"):
    truth = load_split(manifest, split)
    errs = [abs(read_processed(Path(pred_dir) / f"{p.id}.png").mean() - p.soft_tissue.mean()) / 2 for p in truth]
    return float(np.mean(errs))


def _sample_split(cfg, tag, out_dir, split="test"):
    lay = Layout(cfg.output_dir)
    files = [lay.data / r["cxr"] for r in read_manifest(lay.manifest) if r["split"] == split]
    return cmd_sample(cfg, files, out_dir, tag=tag)


def _run_cell(cfg: ExperimentConfig, tag: str, cell_dir: Path, ldm_epochs):
    """Train (if needed), sample the test split and evaluate one configuration."""
    lay = Layout(cfg.output_dir)
    summary = cell_dir / "summary.json"
    stamp = cell_dir / "fingerprint"
    key = f"{cfg.sample_fingerprint()}:{ldm_epochs}"
    if summary.exists() and stamp.exists() and stamp.read_text() == key:
        with open(summary) as fh:
            return json.load(fh), float((cell_dir / "luminance").read_text())
    ckpt = lay.ldm_ckpt(tag)
    done = False
    if ckpt.exists():
        payload = torch.load(ckpt, map_location="cpu", weights_only=False)
        done = payload["epoch"] >= ldm_epochs and payload["extra"].get("fingerprint") == cfg.ldm_fingerprint()
    if not done:
        train_estimator(cfg, ldm_epochs, tag=tag)
    preds = cell_dir / "predictions"
    _sample_split(cfg, tag, preds)
    report = cmd_evaluate(cfg, preds, cell_dir)
    lum = _luminance_error(preds, lay.manifest)
    (cell_dir / "luminance").write_text(repr(lum))
    stamp.write_text(key)
    with open(summary) as fh:
        return json.load(fh), lum


def _row(summary, lum, **keys):
    row = dict(keys)
    for m in ("bsr", "mse", "psnr", "lpips"):
        row[m] = summary[m]["mean"]
    row["luminance_error"] = lum
    row["formatted"] = " | ".join(f"{m}={summary['formatted'][m]}" for m in ("bsr", "mse", "psnr", "lpips"))
    return row


def cmd_ablate(cfg: ExperimentConfig, ldm_epochs=None, out_csv=None):
    """Offset noise {off, on} x thresholding {none, static, dynamic, temporal}.

    Both diffusion models share the compressor and seeds; finished cells are
    reused on rerun.
    """
    lay = Layout(cfg.output_dir)
    _require_manifest(lay, cfg)
    ldm_epochs = cfg.train.ldm_epochs if ldm_epochs is None else ldm_epochs
    if not lay.vqgan_ckpt().exists():
        train_compressor(cfg)
    rows = []
    for offset, kind in ABLATION_GRID:
        cell = _clone(cfg)
        cell.set("schedule.offset_lambda", cfg.schedule.offset_lambda if offset == "on" else 0.0)
        cell.set("sampler.kind", kind)
        # the "on" cell usually matches the main model; reuse its checkpoint then
        tag = "main" if cell.ldm_fingerprint() == cfg.ldm_fingerprint() else f"offset_{offset}"
        summary, lum = _run_cell(cell, tag, lay.root / "ablation" / f"{offset}_{kind}", ldm_epochs)
        rows.append(_row(summary, lum, offset_noise=offset, thresholding=kind))
        logger.info("ablation cell offset=%s thresholding=%s: %s", offset, kind, rows[-1]["formatted"])
    out_csv = Path(out_csv or lay.root / "ablation.csv")
    _write_rows(out_csv, rows, ABLATION_FIELDS)
    return rows


def cmd_sweep(cfg: ExperimentConfig, spec: str, ldm_epochs=None, out_csv=None):
    """One summary row per value of ``key=v1,v2,...``."""
    key, _, values = spec.partition("=")
    if not values:
        raise CommandError(f"bad sweep spec {spec!r}; expected key=v1,v2,...")
    lay = Layout(cfg.output_dir)
    _require_manifest(lay, cfg)
    ldm_epochs = cfg.train.ldm_epochs if ldm_epochs is None else ldm_epochs
    if not lay.vqgan_ckpt().exists():
        train_compressor(cfg)
    rows = []
    for v in values.split(","):
        cell = _clone(cfg)
        try:
            cell.set(key, v)
        except (KeyError, ValueError) as exc:
            raise CommandError(str(exc)) from exc
        tag = f"sweep_{cell.ldm_fingerprint()}"
        safe = f"{key}={v}".replace("/", "_")
        summary, lum = _run_cell(cell, tag, lay.root / "sweeps" / safe, ldm_epochs)
        rows.append(_row(summary, lum, key=key, value=v))
    out_csv = Path(out_csv or lay.root / f"sweep_{key}.csv")
    _write_rows(out_csv, rows, ["key", "value"] + ABLATION_FIELDS[2:])
    return rows


def _clone(cfg: ExperimentConfig) -> ExperimentConfig:
    c = ExperimentConfig()
    for k, v in cfg.to_dict().items():
        if k == "output_dir":
            c.output_dir = v
        else:
            for kk, vv in v.items():
                c.set(f"{k}.{kk}", vv)
    return c


def _write_rows(path, rows, fields):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------------ psd


def cmd_psd(cfg: ExperimentConfig, inputs=None, synthetic=0, n_bins=32, out_csv=None, noise_samples=0):
    """Radially averaged power spectra of images, plus Gaussian noise for reference."""
    imgs = []
    if synthetic:
        imgs = [2 * p.soft_tissue - 1 for p in generate_synthetic_pairs(synthetic, cfg.data.size, cfg.data.synthetic_seed)]
    elif inputs:
        imgs = [read_processed(p) for p in inputs]
    if not imgs:
        raise CommandError("psd needs input images or --synthetic N")
    prof = psd_profile(np.stack(imgs), n_bins)
    cols = {"frequency": prof.frequencies, "image_power_db": prof.to_db()}
    if noise_samples:
        noise = np.random.default_rng(cfg.train.seed).standard_normal((noise_samples,) + imgs[0].shape)
        cols["noise_power_db"] = psd_profile(noise, n_bins).to_db()
    out_csv = Path(out_csv or Layout(cfg.output_dir).root / "psd.csv")
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(cols))
        w.writerows(zip(*cols.values()))
    return prof


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsldm", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI config file")
    p.add_argument("--profile", choices=["desk"], help="preset overrides (desk: 64x64 synthetic scale)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--output-dir", help="output root (default: $BSLDM_OUTPUT or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="preprocess and split a paired dataset")
    sp.add_argument("--synthetic", type=int, help="generate N synthetic pairs instead of reading raw_dir")
    sp.add_argument("--size", type=int, help="target image size")
    sp.add_argument("--raw-dir", help="directory with cxr/ and tissue/ subdirectories")
    sp.add_argument("--force", action="store_true", help="overwrite a dataset prepared with another config")

    sp = sub.add_parser("train", help="train the compressor or the diffusion model")
    sp.add_argument("--stage", choices=["vqgan", "ldm"], required=True)
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("sample", help="generate soft-tissue images")
    sp.add_argument("inputs", nargs="*", help="input radiograph PNGs")
    sp.add_argument("--split", help="sample every radiograph of a manifest split instead")
    sp.add_argument("--output", required=True, help="output directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--trace", help="write per-step latent statistics CSV")
    sp.add_argument("--raw", action="store_true", help="inputs are raw images; run preprocessing first")
    sp.add_argument("--policy", choices=["none", "static", "dynamic", "temporal"])

    sp = sub.add_parser("evaluate", help="score predictions against the ground-truth manifest")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--split", default="test")
    sp.add_argument("--output")

    sp = sub.add_parser("ablate", help="offset-noise x thresholding grid, or a hyperparameter sweep")
    sp.add_argument("--epochs", type=int, help="diffusion epochs per trained model")
    sp.add_argument("--sweep", help="KEY=v1,v2,... (e.g. sampler.omega=0.001,0.003)")
    sp.add_argument("--output")

    sp = sub.add_parser("psd", help="radially averaged power spectral density")
    sp.add_argument("inputs", nargs="*")
    sp.add_argument("--synthetic", type=int, default=0)
    sp.add_argument("--bins", type=int, default=32)
    sp.add_argument("--noise", type=int, default=0, help="also profile N Gaussian noise images")
    sp.add_argument("--output")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise CommandError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    if args.output_dir:
        out["output_dir"] = args.output_dir
    cmd = args.command
    if cmd == "prepare":
        if args.synthetic is not None:
            out["data.synthetic"] = args.synthetic
        if args.size is not None:
            out["data.size"] = args.size
        if args.raw_dir:
            out["data.raw_dir"] = args.raw_dir
            out.setdefault("data.synthetic", 0)
    if cmd == "sample" and args.policy:
        out["sampler.kind"] = args.policy
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        overrides = _overrides(args)
        cfg = load_config(args.config, args.profile, overrides)
        if args.command != "prepare":
            adopt_prepared_data(cfg, overrides)
        if cfg.train.threads > 0:
            torch.set_num_threads(cfg.train.threads)
        if args.command == "prepare":
            print(cmd_prepare(cfg, force=args.force))
        elif args.command == "train":
            cmd_train(cfg, args.stage, args.epochs)
        elif args.command == "sample":
            inputs = list(args.inputs)
            if args.split:
                lay = Layout(cfg.output_dir)
                _require_manifest(lay, cfg)
                inputs += [lay.data / r["cxr"] for r in read_manifest(lay.manifest) if r["split"] == args.split]
            written = cmd_sample(cfg, inputs, args.output, seed=args.seed, trace_path=args.trace, raw=args.raw)
            print(f"wrote {len(written)} images to {args.output}")
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, args.predictions, args.output, args.split, args.manifest)
            for m, s in report.summary_table().items():
                print(f"{m}: {s}")
        elif args.command == "ablate":
            if args.sweep:
                rows = cmd_sweep(cfg, args.sweep, args.epochs, args.output)
                for r in rows:
                    print(f"{r['key']}={r['value']}: {r['formatted']}")
            else:
                rows = cmd_ablate(cfg, args.epochs, args.output)
                for r in rows:
                    print(f"offset={r['offset_noise']:<3} {r['thresholding']:<8} {r['formatted']}")
        elif args.command == "psd":
            prof = cmd_psd(cfg, args.inputs, args.synthetic, args.bins, args.output, args.noise)
            print(f"{len(prof.power)} bins over {prof.n_samples} images")
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
