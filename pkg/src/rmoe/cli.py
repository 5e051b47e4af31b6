"""Command-line entry point: ``rmoe <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_FAILED_CHECK = 1
EXIT_BAD_INPUT = 3


def _threads() -> None:
    # must run before numba or a BLAS pool starts; the kernels themselves are single-threaded
    n = os.environ.get("RMOE_THREADS")
    if not n:
        return
    n = str(max(1, int(n)))
    for var in ("NUMBA_NUM_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = n


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------- subcommands


def cmd_pretrain(args) -> int:
    from .checkpoint import Checkpoint, save_checkpoint
    from .train import TrainConfig, pretrain

    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    steps = cfg.steps if args.steps is None else args.steps
    state, history = pretrain(cfg, steps)
    last = history[-1] if history else {}
    save_checkpoint(Checkpoint.from_state(state, extra={"final_metrics": last}), args.out)
    print(json.dumps({"step": state.step, "loss": last.get("loss"), "recon": last.get("recon"),
                      "balance": last.get("balance"), "out": str(args.out)}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    res = run_suite(eps=args.eps, tol32=args.tol, tol64=args.tol64)
    for r in res.results:
        if not r.passed or args.verbose:
            print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:13s} seed={r.seed} {r.path}-bit "
                  f"rel_err={r.max_rel_err:.3e} tol={r.tol:.0e}")
    print(f"gradcheck: {len(res.results) - len(res.failures())}/{len(res.results)} passed, "
          f"worst 64-bit {res.worst('64'):.3e}, worst 32-bit {res.worst('32'):.3e}, {res.seconds:.1f}s")
    return 0 if res.passed else EXIT_FAILED_CHECK


def cmd_route_stats(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import ingest_manifest
    from .surgery import profile_activations

    ckpt = load_checkpoint(args.ckpt)
    images = ingest_manifest(args.corpus)
    stats = profile_activations(ckpt.model, images, _norm(ckpt), seed=args.seed)
    _write_json(args.out, stats.to_dict())
    return 0


def cmd_prune(args) -> int:
    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
    from .surgery import ActivationStats, count_params, fuse_model, sparse_prune

    ckpt = load_checkpoint(args.ckpt)
    before = count_params(ckpt.model)
    if args.strategy == "ep":
        if args.stats is None:
            raise ValueError("--stats is required for --strategy ep")
        stats = ActivationStats.from_dict(json.loads(Path(args.stats).read_text()))
        model, report = sparse_prune(ckpt.model, stats, args.percentile, drop_gate_columns=args.drop_gate_columns)
        summary = report.to_dict()
        act = stats.to_dict()
    else:
        model = fuse_model(ckpt.model, args.strategy)
        summary = {"strategy": args.strategy, "params_before": before["total"]}
        act = None
    summary["params_after"] = count_params(model)["total"]
    out = Checkpoint(model, ckpt.step, ckpt.norm, None, act, ckpt.train_config,
                     {"surgery": args.strategy, "report": summary})
    save_checkpoint(out, args.out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_decompose(args) -> int:
    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
    from .surgery import decompose_modality

    ckpt = load_checkpoint(args.ckpt)
    model = decompose_modality(ckpt.model, args.modality)
    save_checkpoint(Checkpoint(model, ckpt.step, ckpt.norm, None, None, ckpt.train_config,
                               {"surgery": f"decompose:{args.modality}"}), args.out)
    print(json.dumps({"modality": args.modality, "params_before": ckpt.model.num_params(),
                      "params_after": model.num_params()}))
    return 0


def cmd_reconstruct(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import SceneImage, make_batch, patchify, read_raw, unpatchify, write_raw
    from .model import Modality, reconstruct

    ckpt = load_checkpoint(args.ckpt)
    img = read_raw(args.input)
    norm = _norm(ckpt)
    cfg = ckpt.model.config
    if img.height != cfg.image_size or img.width != cfg.image_size:
        raise ValueError(f"image is {img.height}x{img.width}, model expects {cfg.image_size}x{cfg.image_size}")
    batch = make_batch([img], norm, cfg.patch_size, args.mask_ratio, args.seed)
    part = batch.parts[img.modality]
    x_hat, _, _ = reconstruct(ckpt.model, part.tokens, part.mask, img.modality)
    c = img.modality.target_channels
    h, w, p = img.height, img.width, cfg.patch_size
    # destandardise in pixel layout, where the statistics are per channel
    pred_px = norm.destandardize_target(
        img.modality, unpatchify(np.asarray(x_hat.value, np.float64), p, h, w).reshape(h, w, c))
    truth_px = norm.destandardize_target(
        img.modality, unpatchify(part.targets[0].astype(np.float64), p, h, w).reshape(h, w, c))
    pred, truth = patchify(pred_px, p), patchify(truth_px, p)
    # single-channel power maps are written as amplitude-only SAR rasters
    out_mod = Modality.SAR_L2 if img.modality is Modality.SAR_L1 else img.modality
    write_raw(args.out, SceneImage(out_mod, pred_px.astype(np.float32)))
    csv_path = Path(args.out).with_suffix(".csv")
    grid = cfg.image_size // p
    with open(csv_path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["patch", "row", "col", "masked", "mse"])
        for i in range(cfg.num_patches):
            err = float(np.mean((pred[i] - truth[i]) ** 2))
            out.writerow([i, i // grid, i % grid, int(part.mask[0, i]), f"{err:.8g}"])
    masked = part.mask[0]
    mse = float(np.mean((pred[masked] - truth[masked]) ** 2)) if masked.any() else float("nan")
    print(json.dumps({"out": str(args.out), "csv": str(csv_path), "masked_mse": mse}))
    return 0


def cmd_synth(args) -> int:
    from .data import synth_scene, write_manifest, write_raw
    from .model import Modality

    m = Modality.parse(args.modality)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        name = f"{m.value}_{args.seed + i:06d}.raw"
        write_raw(out / name, synth_scene(m, args.seed + i, args.size))
        entries.append((name, m))
    write_manifest(out / "manifest.json", entries)
    print(json.dumps({"count": args.count, "manifest": str(out / "manifest.json")}))
    return 0


def _norm(ckpt):
    from .data import compute_norm_stats

    if ckpt.norm is not None:
        return ckpt.norm
    cfg = ckpt.model.config
    return compute_norm_stats(cfg.modalities, size=cfg.image_size)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    from .model import Modality

    mods = [m.value for m in Modality]
    p = argparse.ArgumentParser(prog="rmoe", description="Mixture-of-modality-experts encoder toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="masked-reconstruction pretraining on synthetic scenes")
    s.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("gradcheck", help="finite-difference check of every kernel and the full loss")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4, help="32-bit path tolerance")
    s.add_argument("--tol64", type=float, default=1e-6, help="64-bit path tolerance")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("route-stats", help="collaborative-expert dispatch frequencies over a corpus")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--corpus", type=Path, required=True, help="manifest.json")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_route_stats)

    s = sub.add_parser("prune", help="expert pruning (ep) or dense fusion (ks, ka, kc)")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--strategy", choices=["ep", "ks", "ka", "kc"], required=True)
    s.add_argument("--percentile", type=float, default=75.0)
    s.add_argument("--stats", type=Path)
    s.add_argument("--drop-gate-columns", action="store_true",
                   help="delete pruned experts' gate columns (renormalizes surviving gate values)")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(fn=cmd_prune)

    s = sub.add_parser("decompose", help="single-modality sub-model")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--modality", choices=mods, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(fn=cmd_decompose)

    s = sub.add_parser("reconstruct", help="masked reconstruction of one RAW image plus per-patch error CSV")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--mask-ratio", type=float, default=0.6)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("synth", help="write synthetic RAW scenes and a manifest")
    s.add_argument("--modality", choices=mods, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    _threads()
    from .checkpoint import CheckpointError
    from .data import RawFormatError
    from .numkit import ConvergenceError, NonFiniteError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (CheckpointError, RawFormatError, ConvergenceError, NonFiniteError, ValueError, KeyError,
            FileNotFoundError) as exc:
        print(f"rmoe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
