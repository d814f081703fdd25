"""Command-line interface: train, finetune, detect, eval, regress,
warp-demo, and gradcheck subcommands.

Configuration comes from an INI file (see ``default_config_text``) with
command-line flags taking precedence.  Every command honors ``--seed`` and
writes its artifacts under ``--out``.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import data as D
from . import regress as R
from . import trainer as T
from .checkpoint import Checkpoint, FormatError, load_checkpoint, save_checkpoint
from .data import PreprocessSpec, WarpSamplerConfig
from .detector import detect
from .gradcheck import run_suite
from .tps import ConfigError, norm_to_pixel, sample_tps, warp_image
from .viz import image_strip, overlay_landmarks


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

def default_config() -> dict:
    return {
        "train": asdict(T.TrainConfig()),
        "preprocess": asdict(PreprocessSpec()),
        "warp.g1": asdict(WarpSamplerConfig()),
        "warp.g2": asdict(WarpSamplerConfig()),
        "regress": asdict(R.FitConfig()),
    }


# defaults that come straight from the published method description,
# annotated as such in the generated config text
METHOD_DEFAULTS = {
    ("train", "learning_rate"), ("train", "gamma"), ("train", "weight_decay"),
    ("train", "lr_decay_factor"),
}


def default_config_text() -> str:
    lines = []
    for section, values in default_config().items():
        lines.append(f"[{section}]")
        for key, val in values.items():
            note = "  ; method default" if (section, key) in METHOD_DEFAULTS else ""
            lines.append(f"{key} = {val}{note}")
        lines.append("")
    return "\n".join(lines)


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if like is None:
        return None if value.lower() in ("none", "") else int(value)
    return type(like)(value)


def load_config(path: str | None):
    """Defaults overlaid with an INI file; unknown keys are rejected."""
    cfg = default_config()
    if path:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";",))
        read = parser.read(path)
        if not read:
            raise CliError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in cfg:
                raise CliError(f"unknown config section [{section}]")
            for key, value in parser[section].items():
                if key not in cfg[section]:
                    raise CliError(f"unknown config key {key!r} in [{section}]")
                cfg[section][key] = _coerce(value, cfg[section][key])
    train = T.TrainConfig(**cfg["train"])
    pre = PreprocessSpec(**cfg["preprocess"])
    g1 = WarpSamplerConfig(**cfg["warp.g1"])
    g2 = WarpSamplerConfig(**cfg["warp.g2"])
    fit = R.FitConfig(**cfg["regress"])
    return train, pre, g1, g2, fit


# ---------------------------------------------------------------------------
# dataset loading

def load_dataset(path: str, annotations: str | None = None,
                 digit: int | None = None, channels: int = 1) -> list[D.Sample]:
    p = Path(path)
    if not p.exists():
        raise CliError(f"dataset path does not exist: {path}")
    if p.is_file():
        labels = _labels_for(p)
        if digit is not None and labels is None:
            raise CliError(f"no labels file found next to {path} for --digit")
        return D.load_idx(p, labels, digit=digit)
    idx = sorted(p.glob("*images*idx3*"))
    if idx:
        labels = _labels_for(idx[0])
        return D.load_idx(idx[0], labels, digit=digit)
    return D.load_image_dir(p, annotation_file=annotations, channels=channels)


def _labels_for(images_path: Path) -> Path | None:
    cand = Path(str(images_path).replace("images", "labels").replace("idx3", "idx1"))
    return cand if cand != images_path and cand.exists() else None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    train_cfg, pre, g1, g2, _ = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.landmarks is not None:
        train_cfg.k = args.landmarks
    samples = load_dataset(args.data, digit=args.digit, channels=train_cfg.in_channels)
    if not samples:
        raise CliError(f"no samples loaded from {args.data}")
    out = _out_dir(args)
    log_path = out / "metrics.log"
    with open(log_path, "w") as logf:
        def log(line):
            print(line)
            logf.write(line + "\n")
        ckpt, _ = T.train(samples, train_cfg, g1, g2, pre, log=log)
    save_checkpoint(ckpt, out / "checkpoint.wmck")
    print(f"wrote {out / 'checkpoint.wmck'} and {log_path}")
    return 0


def _load_ckpt(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, FormatError) as exc:
        raise CliError(str(exc)) from exc


def cmd_finetune(args) -> int:
    train_cfg, pre, g1, g2, _ = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    ckpt = _load_ckpt(args.checkpoint)
    train_cfg.k = ckpt.manifest["k"] if args.landmarks is None else args.landmarks
    train_cfg.in_channels = ckpt.manifest["in_channels"]
    samples = load_dataset(args.data, digit=args.digit, channels=train_cfg.in_channels)
    out = _out_dir(args)
    with open(out / "metrics.log", "w") as logf:
        def log(line):
            print(line)
            logf.write(line + "\n")
        new_ckpt, records = T.finetune(ckpt, samples, train_cfg, g1, g2, pre, log=log)
    save_checkpoint(new_ckpt, out / "checkpoint.wmck")
    print(f"wrote {out / 'checkpoint.wmck'}")
    return 0


def cmd_detect(args) -> int:
    det, ckpt = _load_detector(args.checkpoint)
    pre = PreprocessSpec(**ckpt.manifest["preprocess"])
    samples = load_dataset(args.data, channels=det.in_channels)
    out = _out_dir(args)
    coords_path = out / "landmarks.txt"
    failures = 0
    with open(coords_path, "w") as cf:
        for s in samples:
            try:
                plain = D.preprocess_plain(s.image, pre)
                x = torch.from_numpy(plain[None])
                _, lm = detect(det, x)
                lm = lm[0].numpy()
            except Exception as exc:  # unreadable/misshaped input: skip
                print(f"warning: skipping {s.identifier!r}: {exc}", file=sys.stderr)
                failures += 1
                continue
            h, w = plain.shape[:2]
            px = norm_to_pixel(lm, (w, h))
            fields = [s.identifier]
            for (nx, ny), (pxx, pxy) in zip(lm, px):
                fields += [f"{nx:.6f}", f"{ny:.6f}", f"{pxx:.3f}", f"{pxy:.3f}"]
            cf.write(" ".join(fields) + "\n")
            stem = Path(s.identifier).stem or s.identifier
            overlay_landmarks(plain, lm, upscale=args.upscale).save(
                out / f"{stem}_landmarks.png")
    if failures and failures == len(samples):
        raise CliError("all inputs failed")
    print(f"wrote overlays and {coords_path}")
    return 0


def _load_detector(path):
    ckpt = _load_ckpt(path)
    return T.detector_from_checkpoint(ckpt), ckpt


def cmd_regress(args) -> int:
    det, ckpt = _load_detector(args.checkpoint)
    _, _, _, g2, fit_cfg = load_config(args.config)
    pre = PreprocessSpec(**ckpt.manifest["preprocess"])
    if args.seed is not None:
        fit_cfg.seed = args.seed
    samples = load_dataset(args.data, annotations=args.annotations,
                           channels=det.in_channels)
    annotated = [s for s in samples if s.annotations is not None]
    if not annotated:
        raise CliError("no annotated samples for regression")
    augment = g2 if fit_cfg.augment_per_sample > 0 else None
    w = R.fit_regressor(det, annotated, pre, fit_cfg, augment=augment)
    out = _out_dir(args)
    new_ckpt = Checkpoint(manifest=dict(ckpt.manifest), arrays=dict(ckpt.arrays))
    new_ckpt.manifest["regressor"] = {"targets": w.shape[0] // 2,
                                      "sources": w.shape[1] // 2,
                                      "fit": asdict(fit_cfg)}
    new_ckpt.arrays["regressor/weights"] = w.astype(np.float64)
    save_checkpoint(new_ckpt, out / "checkpoint.wmck")
    edges = R.contribution_graph(w)
    with open(out / "contribution_graph.txt", "w") as f:
        for src, tgt, wt in edges:
            f.write(f"{src} {tgt} {wt:.6f}\n")
    report = R.evaluate(w, det, annotated, pre, normalization=args.norm,
                        eye_indices=_eyes(args))
    _write_report(out / "fit_report.txt", report)
    print(f"wrote {out / 'checkpoint.wmck'} (fit-set mean error "
          f"{report.mean_error:.6f} {report.normalization})")
    return 0


def _eyes(args) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in args.eyes.split(","))
    except ValueError as exc:
        raise CliError(f"--eyes expects two comma-separated indices: {exc}") from exc
    return a, b


def _write_report(path, report: R.EvalReport) -> None:
    with open(path, "w") as f:
        f.write(f"normalization={report.normalization}\n")
        f.write(f"images={len(report.per_image)} skipped={report.skipped}\n")
        f.write(f"mean_error={report.mean_error:.9f}\n")
        for i, e in enumerate(report.per_image):
            f.write(f"image {i} error={e:.9f}\n")


def cmd_eval(args) -> int:
    det, ckpt = _load_detector(args.checkpoint)
    pre = PreprocessSpec(**ckpt.manifest["preprocess"])
    if "regressor/weights" not in ckpt.arrays:
        raise CliError("checkpoint has no fitted regressor; run `regress` first")
    w = ckpt.arrays["regressor/weights"]
    samples = load_dataset(args.data, annotations=args.annotations,
                           channels=det.in_channels)
    annotated = [s for s in samples if s.annotations is not None]
    report = R.evaluate(w, det, annotated, pre, normalization=args.norm,
                        eye_indices=_eyes(args),
                        warn=lambda msg: print(f"warning: {msg}", file=sys.stderr))
    out = _out_dir(args)
    _write_report(out / "eval_report.txt", report)
    print(f"mean_error={report.mean_error:.6f} ({report.normalization}, "
          f"{len(report.per_image)} images, {report.skipped} skipped)")
    return 0


def cmd_warp_demo(args) -> int:
    _, pre, _, g2, _ = load_config(args.config)
    samples = load_dataset(args.data, channels=pre.channels)
    if not samples:
        raise CliError(f"no images in {args.data}")
    base = D.preprocess_base(samples[0].image, pre)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    images = [base]
    seeds = []
    for i in range(args.count):
        seed = int(rng.integers(2 ** 31))
        seeds.append(seed)
        g = sample_tps(g2, np.random.default_rng(seed))
        images.append(warp_image(base, g, fill="edge"))
    out = _out_dir(args)
    image_strip(images).save(out / "warp_demo.png")
    with open(out / "warp_demo_seeds.txt", "w") as f:
        f.write(" ".join(str(s) for s in seeds) + "\n")
    print(f"wrote {out / 'warp_demo.png'} (seeds: {seeds})")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(instances=args.instances,
                        seed=args.seed if args.seed is not None else 0)
    failed = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{status:4s} {r.name:30s} max_rel_err={r.max_relative_error:.3e} "
              f"tol={r.tolerance:.0e}")
        failed += not r.ok
    return 1 if failed else 0


def cmd_print_config(args) -> int:
    print(default_config_text())
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpmarks",
        description="Unsupervised landmark discovery via warp equivariance.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, checkpoint=False):
        p.add_argument("--config", help="INI config file (see print-config)")
        p.add_argument("--seed", type=int, default=None, help="global RNG seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset: image directory or IDX file/dir")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")

    p = sub.add_parser("train", help="train a detector without supervision")
    common(p)
    p.add_argument("--digit", type=int, default=None,
                   help="keep only this digit label (IDX datasets)")
    p.add_argument("--landmarks", type=int, default=None,
                   help="landmark count K (default from config: 7)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--digit", type=int, default=None)
    p.add_argument("--landmarks", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("detect", help="detect landmarks and render overlays")
    common(p, checkpoint=True)
    p.add_argument("--upscale", type=int, default=4,
                   help="overlay magnification factor (default 4)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("regress",
                       help="fit the linear landmark regressor (frozen detector)")
    common(p, checkpoint=True)
    p.add_argument("--annotations", default=None,
                   help="annotation text file (name x1 y1 ... per line, pixels)")
    p.add_argument("--norm", choices=("iod", "width"), default="iod",
                   help="error normalization: inter-ocular distance or image width")
    p.add_argument("--eyes", default="0,1",
                   help="annotation indices of the two eyes for iod (default 0,1)")
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("eval", help="evaluate a fitted regressor")
    common(p, checkpoint=True)
    p.add_argument("--annotations", default=None)
    p.add_argument("--norm", choices=("iod", "width"), default="iod")
    p.add_argument("--eyes", default="0,1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("warp-demo",
                       help="render a strip of random warps of one image")
    common(p)
    p.add_argument("--count", type=int, default=5,
                   help="number of warped variants (default 5)")
    p.set_defaults(func=cmd_warp_demo)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient suite; nonzero exit on failure")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20,
                   help="random instances per check (default 20)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("print-config", help="print the default configuration")
    p.set_defaults(func=cmd_print_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, FormatError, D.FormatError, R.DataError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
