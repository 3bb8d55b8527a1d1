"""Command-line entry point: ``python -m hierdiff <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .policy import PolicyConfig, PolicyController, TrainingDiverged, load_policy, toy_config, train
from .toyworld import WorldConfig, evaluate, generate_dataset, load_dataset, render_rgbd, reset

log = logging.getLogger("hierdiff")


def _config(args) -> PolicyConfig:
    cfg = PolicyConfig.load(args.config) if args.config else toy_config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    path = _out(args) / "dataset.bin"
    horizons = {"T_o": cfg.T_o, "T_a": cfg.T_a, "T_p": cfg.T_p}
    ds = generate_dataset(args.episodes, cfg.seed, path, WorldConfig(), horizons)
    rate = np.mean([e.success for e in ds.episodes])
    print(f"wrote {len(ds)} episodes to {path} (expert success {rate:.2f})")


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    ds = load_dataset(args.data)
    out = _out(args)
    cfg.save(out / "config.json")
    evaluator = None
    if cfg.eval_every:
        evaluator = lambda p: evaluate(PolicyController(p, cfg.seed), cfg.eval_episodes,
                                       seed=cfg.seed + 1000, cfg=ds.world)
    report = lambda row: log.info("epoch %d total %.4f diffusion %.4f consistency %.4f", row["epoch"],
                                  row["total_loss"], row["diffusion_loss"], row["consistency_loss"])
    result = train(ds.episodes, cfg, out_dir=out, evaluator=evaluator, resume=args.resume, progress=report)
    print(f"final checkpoint {result.checkpoints[-1]}" if result.checkpoints else "no epochs run")


def cmd_eval(args) -> None:
    policy, meta = load_policy(args.checkpoint)
    world = WorldConfig()
    seed = args.seed if args.seed is not None else 0
    latency = args.latency if args.latency is not None else policy.cfg.latency
    rate, details = evaluate(PolicyController(policy, seed, latency), args.episodes, seed=seed,
                             cfg=world, return_details=True)
    out = _out(args)
    with open(out / "eval.csv", "w") as fh:
        fh.write("episode,success,steps\n")
        for i, (ok, n) in enumerate(zip(details["success"], details["steps"])):
            fh.write(f"{i},{int(ok)},{n}\n")
    print(f"success rate {rate:.3f} over {args.episodes} episodes")


def cmd_spectrum(args) -> None:
    from .analysis import observation_sample, spectrum_evolution

    policy, _ = load_policy(args.checkpoint)
    ds = load_dataset(args.data)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    layers, q, chunks = observation_sample(ds.episodes, policy, args.chunks, rng)
    table = spectrum_evolution(policy, layers, q, rng, num_chunks=args.chunks, out_dir=_out(args),
                               expert_chunks=chunks)
    stages = table.attainment_stage()
    print("80% attainment stage per bin:", " ".join(map(str, stages)))


def cmd_ablate(args) -> None:
    from .analysis import run_ablation

    cfg = _config(args)
    ds = load_dataset(args.data)
    seeds = args.seeds or [cfg.seed]
    path = _out(args) / "ablation.csv"
    rows = run_ablation(cfg, ds.episodes, seeds, args.eval_episodes, ds.world, path, workers=args.workers)
    for r in rows:
        print(f"{r['table']:7s} {r['variant']:26s} {r['mean']:.3f}")
    print(f"wrote {path}")


def cmd_layer_preview(args) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .layering import RgbdFrame, partition

    cfg = _config(args)
    if args.data:
        ds = load_dataset(args.data)
        world = ds.world
        ep = ds.episodes[args.episode]
        frame = RgbdFrame(ep.rgb[args.frame], ep.depth[args.frame], world.d_min, world.d_max)
    else:
        world = WorldConfig()
        frame = render_rgbd(reset(np.random.default_rng(cfg.seed), world), world)
    lay = partition(frame, cfg.N)
    panels = [("rgb", frame.rgb), ("depth", frame.depth)]
    panels += [(f"layer {m}", l.rgb) for m, l in enumerate(lay.layers)]
    fig, axes = plt.subplots(1, len(panels), figsize=(2 * len(panels), 2.2))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img, cmap="viridis" if img.ndim == 2 else None)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    path = _out(args) / "layers.png"
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    counts = [int(l.mask.sum()) for l in lay.layers]
    print(f"wrote {path}; pixels per layer {counts}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hierdiff", description=__doc__)
    p.add_argument("--config", help="JSON file of PolicyConfig fields (defaults: toy settings)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="roll out the scripted expert")
    s.add_argument("--episodes", type=int, default=50)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a policy on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="closed-loop success rate of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--episodes", type=int, default=20)
    s.add_argument("--latency", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("spectrum", help="DFT of the denoising trajectory at stage boundaries")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--chunks", type=int, default=100)
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("ablate", help="feature ablations and the layer-count sweep")
    s.add_argument("--data", required=True)
    s.add_argument("--seeds", type=int, nargs="*")
    s.add_argument("--eval-episodes", type=int, default=20)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("layer-preview", help="save the depth layers of one frame as a PNG")
    s.add_argument("--data")
    s.add_argument("--episode", type=int, default=0)
    s.add_argument("--frame", type=int, default=0)
    s.set_defaults(func=cmd_layer_preview)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, IndexError, TrainingDiverged, json.JSONDecodeError) as e:
        print(f"hierdiff {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0
