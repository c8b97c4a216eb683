"""Command-line entry point: ``mfuser {train,eval,bench,ablate,viz-pca,gen-data}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .tensor import ConfigError

OVERRIDE_FLAGS = ("seed", "adapter", "fusion", "enhancer", "stride", "iters")


def _config(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k, None) for k in OVERRIDE_FLAGS}
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    from .train import evaluate, train
    cfg = _config(args)
    out = _out(args, "runs/train")
    res = train(cfg, out, log=print)
    scores = evaluate(res.model)
    print(" ".join(f"{k} {v:.4f}" for k, v in scores.items()))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate, load_model
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint PATH")
    model = load_model(args.checkpoint)
    domains = args.domains.split(",") if args.domains else None
    scores = evaluate(model, domains, seed=args.seed)
    text = "domain,miou\n" + "".join(f"{k},{v!r}\n" for k, v in scores.items())
    if args.out:
        (_out(args, "") / "eval.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_adapters, check_ordering, format_table
    grid = tuple(int(t) for t in args.T.split(","))
    rows, fits = bench_adapters(T_grid=grid, repeats=args.repeats, log=print)
    table = format_table(rows)
    sys.stdout.write(table)
    for k, ok in check_ordering().items():
        print(f"{'ok  ' if ok else 'FAIL'} {k}")
    for m, f in fits.items():
        print(f"fit {m}: r2_linear {f.r2_linear:.4f} r2_quadratic {f.r2_quadratic:.4f} "
              f"loglog_slope {f.loglog_slope:.3f}")
    if args.out:
        (_out(args, "") / "bench.csv").write_text(table)
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablation_grid, format_report, parse_axis
    base = _config(args)
    axes = [parse_axis(a) for a in args.axis] or [parse_axis("fusion")]
    seeds = [int(s) for s in args.seeds.split(",")]
    cells = ablation_grid(base, axes, seeds, _out(args, "runs/ablate"), log=print, dry_run=args.dry_run)
    sys.stdout.write(format_report(cells))
    return 0


def cmd_viz_pca(args) -> int:
    from .backbones import forward_with_adapters
    from .data import generate_dataset, get_domain
    from .model import MFuserModel
    from .pca import pca_visualize
    from .seghead import write_ppm
    from .tensor import no_grad
    from .train import load_model
    model = load_model(args.checkpoint) if args.checkpoint else MFuserModel(_config(args))
    cfg = model.cfg
    out = _out(args, "runs/pca")
    batch = generate_dataset(get_domain(args.domain), args.index + 1, args.seed or 0, size=cfg.image_size)[-1]
    bb = model.backbones
    with no_grad():
        feats = forward_with_adapters(batch.images, bb.vfm if model.use_vfm else None,
                                      bb.vlm if model.use_vlm else None, model.adapters, cfg.stride)
    write_ppm(out / "image.ppm", np.round(batch.images[0] * 255).astype(np.uint8))
    for name, seq in (("vfm", feats.vfm), ("vlm", feats.vlm)):
        if seq is not None:
            pca_visualize(seq, out / f"pca_{name}.ppm")
            print(f"wrote {out / f'pca_{name}.ppm'}")
    return 0


def cmd_gen_data(args) -> int:
    from .data import generate_dataset, get_domain
    from .seghead import colorize, write_label_grid, write_ppm
    out = _out(args, "runs/data")
    seed = args.seed or 0
    for b, batch in enumerate(generate_dataset(get_domain(args.domain), args.n, seed)):
        write_ppm(out / f"{args.domain}_{b:04d}.ppm", np.round(batch.images[0] * 255).astype(np.uint8))
        write_ppm(out / f"{args.domain}_{b:04d}_labels.ppm", colorize(batch.labels[0]))
        write_label_grid(out / f"{args.domain}_{b:04d}.lbl", batch.labels[0])
    print(f"wrote {args.n} images to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfuser", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--adapter")
        sp.add_argument("--fusion")
        sp.add_argument("--enhancer")
        sp.add_argument("--stride", type=int)
        sp.add_argument("--iters", type=int)
        return sp

    common(sub.add_parser("train", help="train one configuration")).set_defaults(fn=cmd_train)
    sp = common(sub.add_parser("eval", help="per-domain mIoU of a checkpoint"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--domains", help="comma-separated domain names")
    sp.set_defaults(fn=cmd_eval)
    sp = common(sub.add_parser("bench", help="adapter parameter / op / wall-time table"))
    sp.add_argument("--T", default="1024,2048,4096,8192", help="comma-separated token counts")
    sp.add_argument("--repeats", type=int, default=3)
    sp.set_defaults(fn=cmd_bench)
    sp = common(sub.add_parser("ablate", help="run an ablation grid"))
    sp.add_argument("--axis", action="append", default=[],
                    help="fusion | enhancer | stride | attention | key=v1,v2 (repeatable)")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--dry-run", action="store_true", help="count parameters only")
    sp.set_defaults(fn=cmd_ablate)
    sp = common(sub.add_parser("viz-pca", help="PCA colour map of final encoder tokens"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--domain", default="source")
    sp.add_argument("--index", type=int, default=0)
    sp.set_defaults(fn=cmd_viz_pca)
    sp = common(sub.add_parser("gen-data", help="write synthetic images and label grids"))
    sp.add_argument("--domain", default="source")
    sp.add_argument("--n", type=int, default=8)
    sp.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
