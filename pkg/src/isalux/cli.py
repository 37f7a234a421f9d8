"""Command-line surface: train, infer, eval, describe, ablate.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
ISALUX_THREADS caps eval worker parallelism. Every run echoes its resolved
configuration before doing any work.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import configfile
from . import losses as L
from . import model as Mo
from . import priors as P
from . import tensor as T
from . import trainer as Tr
from .container import ContainerError
from .errors import DataError, NumericError
from .imageio import load_png, save_png

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

ABLATION_TOGGLES = ("use_illum", "use_seg", "use_lora", "use_l2", "use_perc", "use_msssim")

DEFAULT_ABLATION_MATRIX = """\
name,use_illum,use_seg,use_lora,use_l2,use_perc,use_msssim
no_priors,false,false,true,true,true,true
illum_only,true,false,true,true,true,true
seg_only,false,true,true,true,true,true
illum_seg_no_lora,true,true,false,true,true,true
illum_seg,true,true,true,true,true,true
l2_only,true,true,true,true,false,false
l2_msssim,true,true,true,true,false,true
l2_perc,true,true,true,true,true,false
l2_perc_msssim,true,true,true,true,true,true
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _worker_count() -> int:
    env = os.environ.get("ISALUX_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            raise DataError(f"ISALUX_THREADS must be an integer, got {env!r}")
    return min(8, os.cpu_count() or 1)


def _resolve_config(args) -> Mo.ModelConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        values.update(configfile.parse(path.read_text()))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise DataError(f"--set expects key=value, got {item!r}")
        parsed = configfile.parse(item)
        values.update(parsed)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        values["iterations"] = args.iterations
    defaults = Mo.ModelConfig().to_flat()
    defaults.update(values)
    return Mo.ModelConfig.from_flat(defaults)


def _echo_config(cfg: Mo.ModelConfig) -> None:
    print("resolved config:")
    for line in cfg.to_text().strip().splitlines():
        print(f"  {line}")


def _pad_to_multiple(arr: np.ndarray, multiple: int = 4) -> tuple[np.ndarray, tuple[int, int]]:
    _, h, w = arr.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        arr = np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return arr, (h, w)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    result = Tr.train(cfg, args.data_dir, args.out_dir, resume=args.resume)
    print(f"final checkpoint: {result.checkpoint}")
    print(f"loss log: {result.log_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = Mo.build_from_checkpoint(args.checkpoint)
    _echo_config(model.cfg)
    image = load_png(args.input)
    padded, (h, w) = _pad_to_multiple(image)

    if args.seg_prior:
        sem = P.load_semantic_prior(args.seg_prior).map.data
        if sem.shape[1:] != (h, w):
            raise DataError(
                f"{args.seg_prior}: prior extents {sem.shape[1:]} do not match image {(h, w)}"
            )
        ph, pw = padded.shape[1] - h, padded.shape[2] - w
        if ph or pw:
            sem = np.pad(sem, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    elif args.synthetic_prior:
        sem = P.synthetic_semantic_prior(T.Tensor(padded), seed=args.seed or 0).map.data
    else:
        raise DataError(
            "no semantic prior: pass --seg-prior FILE (exported map) or "
            "--synthetic-prior (built-in deterministic generator)"
        )

    batch = T.Tensor(padded[None])
    bundle = P.compute_priors(batch, T.Tensor(sem[None]))
    with T.no_grad():
        start = time.perf_counter()
        out = model.forward(batch, bundle, training=False)
        elapsed = time.perf_counter() - start
    enhanced = out.data[0, :, :h, :w]
    save_png(args.output, enhanced)
    print(f"forward time: {elapsed * 1000.0:.1f} ms")
    print(f"wrote {args.output} ({w}x{h})")
    return EXIT_OK


def _metric_row(name: str, pred_path: str, gt_path: str):
    pred = load_png(pred_path)
    gt = load_png(gt_path)
    if pred.shape != gt.shape:
        raise DataError(f"{name}: prediction {pred.shape[1:]} and reference {gt.shape[1:]} differ")
    return (
        name,
        L.psnr(pred, gt),
        L.ssim_metric(pred, gt),
        L.msssim_metric(pred, gt),
    )


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise DataError("eval needs existing --pred-dir and --gt-dir")
    preds = {p.name: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.name: p for p in sorted(gt_dir.glob("*.png"))}
    matched = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    print(f"eval: {len(matched)} matched pairs, workers={_worker_count()}")
    for name in unmatched:
        print(f"unmatched, excluded: {name}", file=sys.stderr)
    if not matched:
        raise DataError("no matched prediction/reference filenames")

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        rows = list(
            pool.map(lambda n: _metric_row(n, str(preds[n]), str(gts[n])), matched)
        )

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["name", "psnr_db", "ssim", "msssim"])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.4f}", f"{row[2]:.6f}", f"{row[3]:.6f}"])
        means = [float(np.mean([r[i] for r in rows])) for i in (1, 2, 3)]
        writer.writerow(["mean", f"{means[0]:.4f}", f"{means[1]:.6f}", f"{means[2]:.6f}"])
    finally:
        if args.out:
            out.close()
            print(f"wrote {args.out}")
    return EXIT_OK


def cmd_describe(args) -> int:
    cfg = _resolve_config(args)
    print(Mo.describe(cfg), end="")
    return EXIT_OK


def _parse_matrix(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if header[:1] != ["name"]:
            raise DataError(f"{path}: first matrix column must be 'name'")
        bad = [c for c in header[1:] if c not in ABLATION_TOGGLES]
        if bad:
            raise DataError(f"{path}: invalid toggle keys: {', '.join(bad)}")
        cells = []
        for row in reader:
            cell = {"name": row["name"]}
            for key in header[1:]:
                val = (row[key] or "").strip().lower()
                if val not in ("true", "false"):
                    raise DataError(f"{path}: toggle {key} for {row['name']} must be true/false")
                cell[key] = val == "true"
            cells.append(cell)
    if not cells:
        raise DataError(f"{path}: matrix has no rows")
    return cells


def _cell_config(base: Mo.ModelConfig, cell: dict) -> Mo.ModelConfig:
    values = base.to_flat()
    values["use_illum"] = cell.get("use_illum", base.use_illum)
    values["use_seg"] = cell.get("use_seg", base.use_seg)
    values["use_lora"] = cell.get("use_lora", base.use_lora)
    if not cell.get("use_l2", True):
        values["lambda_l2"] = 0.0
    if not cell.get("use_perc", True):
        values["lambda_perc"] = 0.0
    if not cell.get("use_msssim", True):
        values["lambda_ssim"] = 0.0
    return Mo.ModelConfig.from_flat(values)


def cmd_ablate(args) -> int:
    if args.emit_default_matrix:
        Path(args.emit_default_matrix).write_text(DEFAULT_ABLATION_MATRIX)
        print(f"wrote {args.emit_default_matrix}")
        return EXIT_OK
    if not args.data_dir or not args.matrix or not args.out_dir:
        raise DataError("ablate needs --data-dir, --matrix, and --out-dir")
    base = _resolve_config(args)
    _echo_config(base)
    cells = _parse_matrix(args.matrix)
    configs = [(cell, _cell_config(base, cell)) for cell in cells]  # validate all first

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "ablation.csv"
    with open(results_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", *ABLATION_TOGGLES, "psnr_db", "ssim", "msssim"])
        for cell, cfg in configs:
            print(f"ablation cell {cell['name']} ...")
            cell_dir = out_dir / cell["name"]
            result = Tr.train(cfg, args.data_dir, str(cell_dir), echo=lambda *_: None)
            model, _ = Mo.build_from_checkpoint(result.checkpoint)
            pairs = Tr.load_pairs(args.data_dir, seed=cfg.seed)
            metrics = []
            for pair in pairs:
                padded, (h, w) = _pad_to_multiple(pair.low)
                sem, _ = _pad_to_multiple(pair.semantic)
                batch = T.Tensor(padded[None])
                bundle = P.compute_priors(batch, T.Tensor(sem[None]))
                with T.no_grad():
                    pred = model.forward(batch, bundle).data[0, :, :h, :w]
                metrics.append(
                    (L.psnr(pred, pair.high), L.ssim_metric(pred, pair.high), L.msssim_metric(pred, pair.high))
                )
            mean = [float(np.mean([m[i] for m in metrics])) for i in range(3)]
            toggles = [str(cell.get(key, True)).lower() for key in ABLATION_TOGGLES]
            writer.writerow([cell["name"], *toggles, f"{mean[0]:.4f}", f"{mean[1]:.6f}", f"{mean[2]:.6f}"])
    print(f"wrote {results_path}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="isalux", description="Prior-conditioned low-light image enhancement")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="override the seed")

    p_train = sub.add_parser("train", help="optimize a model on paired low/high images")
    p_train.add_argument("--data-dir", required=True, help="directory with low/ and high/ PNGs")
    p_train.add_argument("--out-dir", required=True, help="checkpoints and loss log destination")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--iterations", type=int, help="override iteration count")
    add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="enhance one PNG with a trained checkpoint")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--input", required=True)
    p_infer.add_argument("--output", required=True)
    prior = p_infer.add_mutually_exclusive_group()
    prior.add_argument("--seg-prior", help="ISAT1 semantic prior map for the input")
    prior.add_argument("--synthetic-prior", action="store_true", help="use the built-in generator")
    p_infer.add_argument("--seed", type=int, help="seed for the synthetic prior")
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="PSNR/SSIM/MS-SSIM between two folders")
    p_eval.add_argument("--pred-dir", required=True)
    p_eval.add_argument("--gt-dir", required=True)
    p_eval.add_argument("--out", help="CSV destination (default stdout)")
    p_eval.set_defaults(func=cmd_eval)

    p_desc = sub.add_parser("describe", help="shape chain and parameter inventory")
    add_config_flags(p_desc)
    p_desc.set_defaults(func=cmd_describe)

    p_abl = sub.add_parser("ablate", help="train the toggle matrix at desk scale")
    p_abl.add_argument("--data-dir")
    p_abl.add_argument("--matrix", help="CSV of toggle combinations")
    p_abl.add_argument("--out-dir")
    p_abl.add_argument("--emit-default-matrix", metavar="PATH", help="write the 9-cell matrix and exit")
    p_abl.add_argument("--iterations", type=int, help="override iteration count")
    add_config_flags(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (DataError, ContainerError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
