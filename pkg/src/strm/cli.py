"""Command-line entry points: train, eval, gradcheck, inspect-gates, synth-preview.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig

log = logging.getLogger("strm")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or arguments discovered after argparse has run."""


def _limit_threads() -> None:
    raw = os.environ.get("STRM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"STRM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("STRM_THREADS must be >= 0")
    if n > 0:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _load_config(args) -> RunConfig:
    overrides = cfgmod.parse_assignments(args.ablation or "")
    overrides.update(cfgmod.parse_assignments(getattr(args, "set", None) or ""))
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    return cfgmod.load(args.config, overrides)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def write_metrics(path: Path, rows: list[dict]) -> None:
    keys = ["iteration", "L_c", "L_v", "L_p", "total"]
    if any("rank1" in r for r in rows):
        keys.append("rank1")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([r["iteration"]] + [f"{r[k]:.17g}" if k in r else "" for k in keys[1:]])


def cmd_train(args) -> int:
    from .plotting import plot_losses
    from .trainer import TrainState, build, fit, save_checkpoint

    cfg = _load_config(args)
    out = _out_dir(args.out)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    model, opt = build(cfg)
    state = TrainState(model, opt, cfg)
    every = args.checkpoint_every

    def on_step(it, res):
        if every and it % every == 0 and it < cfg.train.iterations:
            save_checkpoint(out / f"checkpoint_{it:06d}.strm", state)

    fit(cfg, on_step=on_step, state=state)
    save_checkpoint(out / "checkpoint.strm", state)
    write_metrics(out / "metrics.csv", state.metrics)
    if state.metrics and not args.no_figures:
        plot_losses(state.metrics, out / "loss.png")
    last = state.metrics[-1] if state.metrics else None
    print(f"trained {state.iteration} iterations -> {out / 'checkpoint.strm'}")
    if last:
        print(f"final  L_c {last['L_c']:.4f}  L_v {last['L_v']:.4f}  L_p {last['L_p']:.4f}  total {last['total']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _parse_data_spec(spec: str) -> tuple[str, dict]:
    """``synth`` or ``dirs:ROOT[:SPLIT_FILE]``."""
    if spec == "synth":
        return "synth", {}
    if spec.startswith("dirs:"):
        parts = spec[5:].split(":")
        if not parts[0] or len(parts) > 2:
            raise UsageError(f"bad --data spec {spec!r}; expected dirs:ROOT[:SPLIT_FILE]")
        return "dirs", {"root": parts[0], "split": parts[1] if len(parts) == 2 else None}
    raise UsageError(f"bad --data spec {spec!r}; expected 'synth' or 'dirs:ROOT[:SPLIT_FILE]'")


def _eval_dirs(state, root: str, split: str | None, max_rank: int):
    from .evaluation import EvalSet, evaluate, multi_trial
    from .synthdata import load_frame_dirs
    from .trainer import describe_all

    cfg = state.config
    seqs = load_frame_dirs(root, split, "test" if split else None, cfg.data.image_size)
    cams = np.unique(seqs.cameras)
    if len(cams) < 2:
        raise ValueError(f"{root}: need sequences from at least two cameras, found {len(cams)}")
    probe = seqs.cameras == cams[0]
    gallery = seqs.cameras == cams[1]
    desc = describe_all(state.model, seqs.frames)
    es = EvalSet(desc[probe], seqs.identities[probe], desc[gallery], seqs.identities[gallery], strict=False)
    res, dist = evaluate(es, max_rank)
    return multi_trial([res]), [dist]


def cmd_eval(args) -> int:
    from .evaluation import write_cmc, write_distance_csv
    from .plotting import plot_cmc
    from .trainer import evaluate_synthetic, load_checkpoint

    kind, opts = _parse_data_spec(args.data)
    if args.trials is not None and args.trials < 1:
        raise UsageError("--trials must be >= 1")
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    if kind == "synth":
        summary, dists = evaluate_synthetic(state.model, cfg, trials=args.trials, trial_offset=args.seed,
                                            keep_distances=True)
    else:
        summary, dists = _eval_dirs(state, opts["root"], opts["split"], cfg.eval.max_rank)
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(str(out.parent))
    write_cmc(out, summary)
    if args.distances:
        write_distance_csv(args.distances, dists[0])
    if not args.no_figures:
        plot_cmc(summary, out.with_suffix(".png"))
    n = len(summary.trials)
    print(f"trials {n}  rank-1 {summary.cmc_mean[0]:.4f} (std {summary.cmc_std[0]:.4f})  "
          f"mAP {summary.map_mean:.4f} (std {summary.map_std:.4f})")
    for r in (1, 5, 10, 20):
        if r <= len(summary.cmc_mean):
            print(f"rank-{r:<3d}{summary.cmc_mean[r - 1]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradsuite import MODULES, check_module, format_table

    mods = MODULES if args.module == "all" else (args.module,)
    reports = [check_module(m, seeds=args.seeds, tol=args.tol) for m in mods]
    print(format_table(reports, args.tol))
    ok = all(r.passed(args.tol) for r in reports)
    print("gradcheck " + ("PASSED" if ok else "FAILED") + f" at tol {args.tol:g}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# inspect-gates
# ---------------------------------------------------------------------------

_SYNTH_KEYS = {"identity": int, "camera": int, "seed": int, "frames": int, "occlusion": float, "constant": bool}


def parse_sequence_spec(spec: str) -> tuple[str, dict]:
    """``synth:identity=0,camera=1,seed=3,occlusion=0.5,frames=4,constant=false`` or ``dir:PATH``."""
    if spec.startswith("dir:"):
        return "dir", {"path": spec[4:]}
    if spec == "synth" or spec.startswith("synth:"):
        opts: dict = {"identity": 0, "camera": 0, "seed": 0, "frames": None, "occlusion": None, "constant": False}
        for key, raw in cfgmod.parse_assignments(spec[6:]).items():
            if key not in _SYNTH_KEYS:
                raise UsageError(f"unknown sequence key {key!r}; expected one of {', '.join(_SYNTH_KEYS)}")
            try:
                if _SYNTH_KEYS[key] is bool:
                    opts[key] = raw.lower() in ("1", "true", "yes", "on")
                else:
                    opts[key] = _SYNTH_KEYS[key](raw)
            except ValueError:
                raise UsageError(f"bad value for sequence key {key!r}: {raw!r}") from None
        return "synth", opts
    raise UsageError(f"bad --sequence {spec!r}; expected synth:key=value,... or dir:PATH")


def load_sequence(state, spec: str) -> tuple[np.ndarray, np.ndarray | None]:
    from .synthdata import load_image, render_sequence, with_corruption

    kind, opts = parse_sequence_spec(spec)
    data = state.config.data
    if kind == "dir":
        path = Path(opts["path"])
        if not path.is_dir():
            raise FileNotFoundError(f"sequence directory {path} does not exist")
        files = sorted(f for f in path.iterdir() if f.is_file())
        if not files:
            raise ValueError(f"sequence directory {path} has no frames")
        return np.stack([load_image(f, data.image_size) for f in files]), None
    if not 0 <= opts["identity"] < data.num_identities:
        raise UsageError(f"identity {opts['identity']} outside 0..{data.num_identities - 1}")
    if not 0 <= opts["camera"] < data.num_cameras:
        raise UsageError(f"camera {opts['camera']} outside 0..{data.num_cameras - 1}")
    corruption = data.corruption
    if opts["occlusion"] is not None:
        corruption = with_corruption(data, occlusion_prob=opts["occlusion"]).corruption
    frames = opts["frames"] or data.frames
    seq, masks = render_sequence(opts["identity"], opts["camera"], frames, corruption,
                                 [opts["seed"], 7919], data, with_masks=True)
    if opts["constant"]:
        seq = np.repeat(seq[:1], frames, axis=0)
        masks = np.repeat(masks[:1], frames, axis=0)
    return seq, masks


def cmd_inspect_gates(args) -> int:
    from .gates import export_trace, occlusion_contrast, trace_gates
    from .trainer import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    if not state.config.model.use_rru:
        raise UsageError(f"{args.checkpoint}: model was trained without the RRU; no gates to inspect")
    frames, masks = load_sequence(state, args.sequence)
    trace = trace_gates(state.model, frames)
    out = _out_dir(args.out)
    written = export_trace(trace, out)
    print(f"wrote {len(written)} files for {len(frames)} frames to {out}")
    print("t\tgate_mean\tgate_min\tgate_max")
    for t, g in enumerate(trace.gates, 1):
        print(f"{t}\t{g.mean():.6f}\t{g.min():.6f}\t{g.max():.6f}")
    if masks is not None:
        contrast = occlusion_contrast(trace.gates, masks, state.model.feature_size)
        if contrast is None:
            print("occlusion\tnone after the first frame")
        else:
            inside, outside = contrast
            print(f"occluded_gate_mean\t{inside:.6f}\nclean_gate_mean\t{outside:.6f}")
            print(f"lower_inside\t{'yes' if inside < outside else 'no'}")
    if args.figure:
        from .plotting import plot_gate_trace

        plot_gate_trace(frames, trace.raw, trace.refined, trace.gates, args.figure)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth-preview
# ---------------------------------------------------------------------------

def cmd_synth_preview(args) -> int:
    from .plotting import plot_frame_grid
    from .synthdata import render_sequence

    cfg = cfgmod.load(args.config, cfgmod.parse_assignments(args.set or "")) if args.config else RunConfig()
    data = cfg.data
    n = min(args.identities, data.num_identities)
    rows, labels = [], []
    for ident in range(n):
        for cam in range(data.num_cameras):
            rows.append(render_sequence(ident, cam, data.frames, data.corruption, [args.seed, ident, cam], data))
            labels.append(f"id {ident} cam {cam}")
    plot_frame_grid(rows, labels, args.out)
    print(f"wrote {args.out} ({len(rows)} sequences of {data.frames} frames)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", required=True, help="config file ([train], [model], [data], [eval])")
    t.add_argument("--seed", type=_u64, help="overrides train.seed")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--ablation", help="comma-separated key=value overrides, e.g. use_rru=false,use_lp=false")
    t.add_argument("--set", help="further key=value overrides (same syntax as --ablation)")
    t.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="also write checkpoint_NNNNNN.strm every N iterations")
    t.add_argument("--no-figures", action="store_true", help="skip loss.png")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="CMC / mAP of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default="synth", help="'synth' (default) or dirs:ROOT[:SPLIT_FILE]")
    e.add_argument("--trials", type=int, help="synthetic trials (default from the checkpoint config)")
    e.add_argument("--seed", type=int, default=0, help="index of the first synthetic trial")
    e.add_argument("--out", required=True, help="CMC text file; a .png with the curve is written beside it")
    e.add_argument("--distances", help="also write the first trial's distance matrix as CSV")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--module", default="all", choices=["all", "rru", "stim", "loss", "backbone"])
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seeds", type=int, default=20)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect-gates", help="export per-frame gate, X and S maps")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--sequence", default="synth",
                   help="synth:identity=I,camera=C,seed=S,occlusion=P,frames=T,constant=BOOL or dir:PATH")
    i.add_argument("--out", required=True, help="directory for *_tNNN.csv / *_tNNN.pgm")
    i.add_argument("--figure", help="optional PNG with frames, X, S and Z side by side")
    i.set_defaults(func=cmd_inspect_gates)

    s = sub.add_parser("synth-preview", help="render a grid of synthetic sequences")
    s.add_argument("--config")
    s.add_argument("--set", help="key=value overrides")
    s.add_argument("--identities", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="PNG path")
    s.set_defaults(func=cmd_synth_preview)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .trainer import CheckpointError, TrainingDiverged

    try:
        _limit_threads()
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"strm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingDiverged, OSError, ValueError, KeyError) as exc:
        print(f"strm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
