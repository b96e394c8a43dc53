"""Command-line entry point: training, evaluation, experiment grids,
gradient checking, and curve plotting."""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import TrainConfig, load_config
from .errors import DpfrlError
from .summarize import (
    load_run,
    read_metrics,
    render_table,
    summarize,
    write_summary_csv,
)

GRADCHECK_TOL = 1e-4

ABLATION_FAMILY = ("dpfrl", "dpfrl-generative", "dpfrl-p1", "dpfrl-mean",
                   "dpfrl-grumerge")


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise DpfrlError(f"--set expects key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _cell_dir(base: str, variant: str, l: int, K: int, seed: int) -> str:
    return os.path.join(base, f"{variant}_l{l}_K{K}_seed{seed}")


def _train_cell(payload: tuple) -> str:
    cfg_dict, run_dir = payload
    from .trainer import train  # imported in the worker process

    cfg = TrainConfig(**cfg_dict)
    train(cfg, run_dir)
    return run_dir


def run_grid(cells: list[tuple[dict, str]], workers: int) -> list[str]:
    """Train every (config, run_dir) cell, skipping ones already complete;
    cells run as independent processes."""
    pending = []
    done = []
    for cfg_dict, run_dir in cells:
        if os.path.isdir(run_dir):
            try:
                if load_run(run_dir).complete:
                    done.append(run_dir)
                    continue
            except DpfrlError:
                pass
        pending.append((cfg_dict, run_dir))
    if pending:
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        if workers > 1:
            import multiprocessing as mp

            ctx = mp.get_context("spawn")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                for run_dir in pool.map(_train_cell, pending):
                    print(f"finished {run_dir}", flush=True)
                    done.append(run_dir)
        else:
            for payload in pending:
                done.append(_train_cell(payload))
                print(f"finished {done[-1]}", flush=True)
    return sorted(done)


def _grid_cells(base_cfg: TrainConfig, out_dir: str, variants: list[str],
                ls: list[int], seeds: list[int]) -> list[tuple[dict, str]]:
    cells = []
    for variant in variants:
        for l in ls:
            for seed in seeds:
                cfg = TrainConfig(**base_cfg.__dict__)
                K = cfg.K
                if variant == "dpfrl-p1":
                    cfg.variant, cfg.K = "dpfrl", 1
                    K = 1
                else:
                    cfg.variant = variant
                cfg.noise_len = l
                cfg.seed = seed
                cfg.validate()
                cells.append(
                    (dict(cfg.__dict__), _cell_dir(out_dir, variant, l, K, seed))
                )
    return cells


def cmd_train(args) -> int:
    from .trainer import train

    cfg = load_config(args.config, _parse_overrides(args.set))
    out = train(cfg, args.out, quiet=args.quiet)
    print(json.dumps(out, indent=2))
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate

    out = evaluate(args.checkpoint, args.episodes, noise_len=args.l,
                   seed=args.seed)
    print(f"mean return over {out['episodes']} episodes: "
          f"{out['mean_return']:.3f} +/- {out['std_return']:.3f}")
    return 0


def _finish_grid(out_dir: str, run_dirs: list[str]) -> int:
    summary = summarize(run_dirs)
    table = render_table(summary)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(table)
    write_summary_csv(summary, os.path.join(out_dir, "summary.csv"))
    print(table)
    return 0 if not summary.incomplete else 1


def cmd_sweep(args) -> int:
    base = load_config(args.config, _parse_overrides(args.set))
    os.makedirs(args.out, exist_ok=True)
    cells = _grid_cells(base, args.out, args.variants.split(","),
                        [int(x) for x in args.l.split(",")],
                        [int(x) for x in args.seeds.split(",")])
    print(f"sweep: {len(cells)} cells")
    run_dirs = run_grid(cells, args.workers)
    return _finish_grid(args.out, run_dirs)


def cmd_ablate(args) -> int:
    base = load_config(args.config, _parse_overrides(args.set))
    os.makedirs(args.out, exist_ok=True)
    variants = args.variants.split(",")
    for v in variants:
        if v not in ABLATION_FAMILY:
            raise DpfrlError(
                f"unknown ablation variant {v!r}; family: {', '.join(ABLATION_FAMILY)}"
            )
    cells = _grid_cells(base, args.out, variants, [args.l],
                        [int(x) for x in args.seeds.split(",")])
    print(f"ablate: {len(cells)} cells at l={args.l}")
    run_dirs = run_grid(cells, args.workers)
    return _finish_grid(args.out, run_dirs)


def cmd_gradcheck(args) -> int:
    from .trainer import pipeline_grad_check

    cfg = load_config(args.config, _parse_overrides(args.set))
    cfg.dtype = "float64"
    err = pipeline_grad_check(cfg, seed=args.seed)
    print(f"max relative gradient error: {err:.6e}")
    if err < GRADCHECK_TOL:
        print(f"PASS (< {GRADCHECK_TOL})")
        return 0
    print(f"FAIL (>= {GRADCHECK_TOL})")
    return 1


def _find_runs(root: str) -> list[str]:
    if os.path.exists(os.path.join(root, "metrics.jsonl")):
        return [root]
    runs = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if os.path.isdir(d) and os.path.exists(os.path.join(d, "metrics.jsonl")):
            runs.append(d)
    return runs


def cmd_plot(args) -> int:
    runs = _find_runs(args.runs)
    if not runs:
        print(f"no metrics found under {args.runs}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "curves.csv")
    rows = 0
    series = {}
    with open(csv_path, "w") as fh:
        fh.write("run,step,episodes,mean_return,loss_a,loss_v,loss_h,grad_norm\n")
        for run in runs:
            name = os.path.basename(run.rstrip("/"))
            records = read_metrics(os.path.join(run, "metrics.jsonl"))
            xs, ys = [], []
            for r in records:
                ret = "" if r["mean_return"] is None else repr(r["mean_return"])
                fh.write(
                    f"{name},{r['step']},{r['episodes']},{ret},"
                    f"{r['loss_a']!r},{r['loss_v']!r},{r['loss_h']!r},"
                    f"{r['grad_norm']!r}\n"
                )
                rows += 1
                if r["mean_return"] is not None:
                    xs.append(r["step"])
                    ys.append(r["mean_return"])
            series[name] = (xs, ys)

    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 5))
    for name, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, label=name, linewidth=1.0)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean episode return")
    ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    svg_path = os.path.join(args.out, "curves.svg")
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    print(f"wrote {csv_path} ({rows} rows) and {svg_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dpfrl",
        description="Particle-filter RL on the Mountain Hike benchmark",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training job")
    t.add_argument("--config", default="", help="flat key=value config file")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with the greedy policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--l", type=int, default=None,
                   help="noise length (must match the checkpoint's)")
    e.add_argument("--seed", type=int, default=123)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="noise-length grid for dpfrl and the gru baseline")
    s.add_argument("--config", default="")
    s.add_argument("--out", required=True)
    s.add_argument("--l", default="0,50,100")
    s.add_argument("--variants", default="dpfrl,gru")
    s.add_argument("--seeds", default="1,2,3")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(fn=cmd_sweep)

    a = sub.add_parser("ablate", help="model-variant family at one noise length")
    a.add_argument("--config", default="")
    a.add_argument("--out", required=True)
    a.add_argument("--l", type=int, default=50)
    a.add_argument("--variants", default=",".join(ABLATION_FAMILY))
    a.add_argument("--seeds", default="1,2,3")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    g.add_argument("--config", default="")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   default=["envs=2", "K=3", "H=8", "m=3", "noise_len=2",
                            "total_env_steps=1000"])
    g.set_defaults(fn=cmd_gradcheck)

    pl = sub.add_parser("plot", help="emit curves.csv and curves.svg from metrics logs")
    pl.add_argument("--runs", required=True, help="run dir or parent of run dirs")
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DpfrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
