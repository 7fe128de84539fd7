"""Command-line interface.

Every run writes its outputs under --out, including a run.json holding the
exact argv and resolved settings; `tryondit replay run.json --out NEW`
re-executes the recorded command. Seeds resolve as: --seed flag, else the
OMNIDIT_SEED environment variable, else 0.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction

from . import __version__


def _resolve_seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("OMNIDIT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"OMNIDIT_SEED must be an integer, got {env!r}")
    return 0


def _write_run_json(args, resolved):
    os.makedirs(args.out, exist_ok=True)
    payload = {
        "argv": sys.argv[1:],
        "version": __version__,
        "seed": resolved.get("seed"),
        "resolved": resolved,
    }
    with open(os.path.join(args.out, "run.json"), "w") as f:
        json.dump(payload, f, indent=1)


def _add_common(p, out_required=True):
    p.add_argument("--seed", type=int, default=None,
                   help="RNG seed (default: $OMNIDIT_SEED or 0)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--dtype", choices=("f32", "f64"), default=None)


def _grid(text):
    w, _, h = text.partition("x")
    return (int(w), int(h))


def _dt_list(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        out.append(float(Fraction(part)) if "/" in part else float(part))
    return out


def build_parser():
    ap = argparse.ArgumentParser(prog="tryondit",
                                 description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a procedural triplet dataset")
    _add_common(p)
    p.add_argument("--size", type=int, required=True, help="number of triplets")
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--ppm", action="store_true", help="also dump preview images")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the staged training loop")
    _add_common(p)
    p.add_argument("--data", default=None, help="dataset dir from gen-data")
    p.add_argument("--resume", default=None, help="checkpoint dir to resume")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample images from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", default="model_free_tryon")
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--guidance", type=float, default=4.0)
    p.add_argument("--trajectory", action="store_true",
                   help="also dump the raw trajectory states")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("evaluate", help="score a checkpoint on held-out items")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--eval-size", type=int, default=24)
    p.add_argument("--eval-seed", type=int, default=999)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--guidance", type=float, default=4.0)
    p.set_defaults(fn=cmd_evaluate)

    pa = sub.add_parser("analyze", help="field diagnostics")
    asub = pa.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("lipschitz", help="estimate the field's Lipschitz constant")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--probe-steps", type=int, default=16)
    p.add_argument("--eval-size", type=int, default=8)
    p.add_argument("--eval-seed", type=int, default=999)
    p.set_defaults(fn=cmd_lipschitz)

    p = asub.add_parser("smoothness", help="rollout smoothness statistics")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--dt", type=float, default=0.03)
    p.add_argument("--chains", type=int, default=64)
    p.add_argument("--eval-size", type=int, default=8)
    p.add_argument("--eval-seed", type=int, default=999)
    p.set_defaults(fn=cmd_smoothness)

    p = asub.add_parser("errdt", help="integration error vs step size")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dts", default="1/8,1/16,1/32,1/64,1/128")
    p.add_argument("--eval-size", type=int, default=8)
    p.add_argument("--eval-seed", type=int, default=999)
    p.set_defaults(fn=cmd_errdt)

    p = asub.add_parser("compare", help="paired ssp-vs-mtp training comparison")
    _add_common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--pairs", type=int, default=120)
    p.add_argument("--eval-size", type=int, default=6)
    p.add_argument("--eval-seed", type=int, default=999)
    p.set_defaults(fn=cmd_compare)

    pb = sub.add_parser("bench", help="micro-benchmarks")
    bsub = pb.add_subparsers(dest="bench", required=True)
    p = bsub.add_parser("attn", help="windowed vs full attention cost")
    _add_common(p)
    p.add_argument("--ref-tokens", type=int, default=4096)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(fn=cmd_bench_attn)

    pl = sub.add_parser("layout", help="token layout tools")
    lsub = pl.add_subparsers(dest="layout", required=True)
    p = lsub.add_parser("dump", help="dump a sequence layout as JSON")
    _add_common(p)
    p.add_argument("--noisy", type=_grid, default=(8, 8), help="WxH")
    p.add_argument("--refs", default="8x8", help="comma-separated WxH list")
    p.add_argument("--text", type=int, default=3)
    p.set_defaults(fn=cmd_layout_dump)

    pm = sub.add_parser("model", help="model tools")
    msub = pm.add_subparsers(dest="model", required=True)
    p = msub.add_parser("info", help="parameter counts and layer table")
    _add_common(p)
    p.set_defaults(fn=cmd_model_info)

    p = sub.add_parser("replay", help="re-run a recorded command")
    p.add_argument("run_json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_replay)

    return ap


# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    from .data import Dataset
    seed = _resolve_seed(args)
    _write_run_json(args, {"seed": seed, "size": args.size,
                           "image_size": args.image_size})
    ds = Dataset.generate(seed, args.size, args.image_size)
    ds.save(os.path.join(args.out, "dataset"), ppm=args.ppm)
    if not args.quiet:
        print(f"wrote {len(ds)} triplets to {args.out}/dataset")
    return 0


def _load_train_config(args, seed):
    from .trainer import TrainConfig
    if args.config:
        with open(args.config) as f:
            cfg = TrainConfig.from_json(json.load(f))
        if args.seed is not None:
            cfg = _replace_seed(cfg, seed)
    else:
        cfg = TrainConfig(seed=seed)
    if args.dtype:
        from dataclasses import replace
        cfg = replace(cfg, model=replace(cfg.model, dtype=args.dtype))
    return cfg


def _replace_seed(cfg, seed):
    from dataclasses import replace
    return replace(cfg, seed=seed)


def cmd_train(args):
    from .data import Dataset
    from .trainer import train
    seed = _resolve_seed(args)
    cfg = _load_train_config(args, seed)
    _write_run_json(args, {"seed": cfg.seed, "config": cfg.to_json()})
    dataset = Dataset.load(os.path.join(args.data, "dataset")) if args.data else None
    res = train(cfg, args.out, resume_from=args.resume, dataset=dataset,
                quiet=args.quiet)
    status = "aborted (non-finite loss)" if res.aborted else "done"
    if not args.quiet:
        print(f"training {status} at step {res.steps_done}; "
              f"checkpoint: {res.checkpoint}")
    return 1 if res.aborted else 0


def _eval_items(args, model):
    from .data import make_eval_set
    return make_eval_set(args.eval_seed, args.eval_size,
                         image_size=model.config.image_size)


def cmd_sample(args):
    import numpy as np
    from .data import gen_triplet, make_task
    from .sampler import sample
    from .tensorio import write_odt, write_ppm
    from .trainer import load_checkpoint
    seed = _resolve_seed(args)
    _write_run_json(args, {"seed": seed, "task": args.task, "steps": args.steps,
                           "guidance": args.guidance, "data_seed": args.data_seed})
    model, _, _, _ = load_checkpoint(args.ckpt)
    rows = []
    for i in range(args.count):
        item = make_task(gen_triplet(args.data_seed + i, model.config.image_size),
                         args.task)
        if args.trajectory:
            img, traj = sample(model, item.conditions, item.text_ids,
                               steps=args.steps, guidance=args.guidance,
                               seed=seed + i, record=True)
            write_odt(os.path.join(args.out, f"trajectory_{i}.odt"),
                      np.stack(traj.states))
        else:
            img = sample(model, item.conditions, item.text_ids,
                         steps=args.steps, guidance=args.guidance, seed=seed + i)
        write_ppm(os.path.join(args.out, f"sample_{i}.ppm"), img)
        write_odt(os.path.join(args.out, f"sample_{i}.odt"), img)
        mse = float(((img - item.target) ** 2).mean())
        rows.append({"index": i, "task": args.task, "mse_vs_target": mse})
    with open(os.path.join(args.out, "samples.json"), "w") as f:
        json.dump(rows, f, indent=1)
    if not args.quiet:
        print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_evaluate(args):
    from .trainer import evaluate, load_checkpoint
    seed = _resolve_seed(args)
    _write_run_json(args, {"seed": seed, "eval_size": args.eval_size,
                           "eval_seed": args.eval_seed, "steps": args.steps,
                           "guidance": args.guidance})
    model, _, _, _ = load_checkpoint(args.ckpt)
    report = evaluate(model, _eval_items(args, model), steps=args.steps,
                      guidance=args.guidance, seed=seed)
    with open(os.path.join(args.out, "eval.json"), "w") as f:
        json.dump(report, f, indent=1)
    if not args.quiet:
        for task, agg in report["per_task"].items():
            print(task, json.dumps(agg))
    return 0


def cmd_lipschitz(args):
    from .analysis import model_lipschitz
    from .svgplot import line_plot
    from .trainer import load_checkpoint
    seed = _resolve_seed(args)
    _write_run_json(args, {"seed": seed, "pairs": args.pairs,
                           "probe_steps": args.probe_steps})
    model, _, _, _ = load_checkpoint(args.ckpt)
    rep = model_lipschitz(model, _eval_items(args, model), n_pairs=args.pairs,
                          steps=args.probe_steps, seed=seed)
    with open(os.path.join(args.out, "lipschitz.json"), "w") as f:
        json.dump({"l_hat": rep.l_hat, "n_pairs": rep.n_pairs,
                   "floor": rep.floor}, f, indent=1)
    ranked = sorted(rep.ratios, reverse=True)
    line_plot(os.path.join(args.out, "lipschitz.svg"),
              {"ratios (ranked)": list(enumerate(ranked))},
              title=f"L_hat = {rep.l_hat:.4g}", xlabel="rank", ylabel="ratio")
    if not args.quiet:
        print(f"L_hat = {rep.l_hat:.6g} over {rep.n_pairs} pairs")
    return 0


def cmd_smoothness(args):
    from .analysis import chain_samples_for, measure_smoothness
    from .trainer import load_checkpoint
    seed = _resolve_seed(args)
    _write_run_json(args, {"seed": seed, "k": args.k, "dt": args.dt,
                           "chains": args.chains})
    model, _, _, _ = load_checkpoint(args.ckpt)
    items = _eval_items(args, model)
    samples = chain_samples_for(items, args.k, args.dt, args.chains, seed=seed)
    rep = measure_smoothness(
        lambda s: model.velocity_fn(s.conditions, s.text_ids),
        samples, args.k, args.dt)
    with open(os.path.join(args.out, "smoothness.json"), "w") as f:
        json.dump(rep.__dict__, f, indent=1)
    if not args.quiet:
        print(f"R = {rep.r_mean:.6g} +- {rep.r_stderr:.2g}, "
              f"violations = {rep.bound_violations}")
    return 0


def cmd_errdt(args):
    import csv as _csv
    from .analysis import error_vs_dt
    from .svgplot import line_plot
    from .trainer import load_checkpoint
    seed = _resolve_seed(args)
    dts = _dt_list(args.dts)
    _write_run_json(args, {"seed": seed, "dts": dts})
    model, _, _, _ = load_checkpoint(args.ckpt)
    items = _eval_items(args, model)
    curve = error_vs_dt(lambda it: model.velocity_fn(it.conditions, it.text_ids),
                        items, dts, seed=seed)
    with open(os.path.join(args.out, "errdt.csv"), "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["dt", "mean_error"])
        for dt, e in curve.rows():
            w.writerow([dt, f"{e:.10e}"])
    with open(os.path.join(args.out, "errdt.json"), "w") as f:
        json.dump({"slope": curve.slope, "dts": curve.dts,
                   "errors": curve.errors}, f, indent=1)
    line_plot(os.path.join(args.out, "errdt.svg"),
              {"error": curve.rows()}, title=f"slope = {curve.slope:.3f}",
              xlabel="dt", ylabel="error", logx=True, logy=True)
    if not args.quiet:
        print(f"log-log slope = {curve.slope:.4f}")
    return 0


def cmd_compare(args):
    from .analysis import compare_ssp_mtp
    from .data import make_eval_set
    seed = _resolve_seed(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    from .trainer import TrainConfig
    if args.config:
        with open(args.config) as f:
            cfg = TrainConfig.from_json(json.load(f))
    else:
        cfg = TrainConfig()
    _write_run_json(args, {"seed": seed, "seeds": seeds, "config": cfg.to_json()})
    items = make_eval_set(args.eval_seed, args.eval_size,
                          image_size=cfg.model.image_size)
    res = compare_ssp_mtp(cfg, seeds, args.out, items, n_pairs=args.pairs,
                          quiet=args.quiet)
    if not args.quiet:
        print(f"median L: ssp={res.median_ssp:.5g} mtp={res.median_mtp:.5g} "
              f"mtp_smoother={res.verdict}")
    return 0


def cmd_bench_attn(args):
    import csv as _csv
    import math
    from .attention import bench_attention
    seed = _resolve_seed(args)
    side = math.isqrt(args.ref_tokens)
    if side * side != args.ref_tokens:
        raise ValueError(f"--ref-tokens must be a perfect square, got {args.ref_tokens}")
    _write_run_json(args, {"seed": seed, "ref_tokens": args.ref_tokens,
                           "window": args.window})
    row = bench_attention(side, args.window, heads=args.heads,
                          head_dim=args.head_dim, repeats=args.repeats, seed=seed)
    with open(os.path.join(args.out, "bench_attn.csv"), "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(list(row))
        w.writerow([row[k] for k in row])
    if not args.quiet:
        ratio = row["flops_windowed"] / row["flops_full"]
        print(f"flops ratio {ratio:.6g}, time windowed {row['time_windowed_ns']} ns, "
              f"full {row['time_full_ns']} ns")
    return 0


def cmd_layout_dump(args):
    from .layout import assign_positions
    seed = _resolve_seed(args)
    refs = [_grid(r) for r in args.refs.split(",")] if args.refs else []
    _write_run_json(args, {"seed": seed, "noisy": list(args.noisy),
                           "refs": [list(r) for r in refs], "text": args.text})
    seq = assign_positions(args.noisy, refs, args.text)
    seq.dump(os.path.join(args.out, "layout.json"))
    if not args.quiet:
        print(f"{seq.total_len} tokens, {len(seq.references)} references")
    return 0


def cmd_model_info(args):
    from .model import ModelConfig, ToyDiT, param_count
    seed = _resolve_seed(args)
    if args.config:
        with open(args.config) as f:
            cfg = ModelConfig(**json.load(f))
    else:
        cfg = ModelConfig()
    if args.dtype:
        from dataclasses import replace
        cfg = replace(cfg, dtype=args.dtype)
    _write_run_json(args, {"seed": seed, "config": cfg.__dict__})
    model = ToyDiT.init(cfg, seed)
    info = {
        "param_count": model.param_count(),
        "param_count_closed_form": param_count(cfg),
        "layers": model.layer_table(),
    }
    with open(os.path.join(args.out, "info.json"), "w") as f:
        json.dump(info, f, indent=1)
    if not args.quiet:
        print(f"{info['param_count']} parameters")
        for row in info["layers"]:
            print(f"  layer {row['layer']}: {row['parity']:8s} {row['params']} params")
    return 0


def cmd_replay(args):
    with open(args.run_json) as f:
        payload = json.load(f)
    argv = list(payload["argv"])
    # substitute the recorded --out with the new one
    if "--out" in argv:
        argv[argv.index("--out") + 1] = args.out
    else:
        argv += ["--out", args.out]
    return dispatch(argv)


# ---------------------------------------------------------------------------

def dispatch(argv):
    ap = build_parser()
    args = ap.parse_args(argv)
    return args.fn(args)


def main(argv=None):
    try:
        code = dispatch(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:  # argparse usage errors exit 2 on their own
        raise e
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
