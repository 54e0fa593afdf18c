"""Command line interface.

    apex gen-bench   --config F --seed N --out DIR
    apex train       --config F --bench DIR --out DIR
    apex eval        --ckpt DIR --bench DIR --split {seen,unseen,source}
                     [--source-only] [--out FILE]
    apex ablate      --config F --bench DIR --out DIR
    apex sweep-slots --config F --bench DIR --j-list 1,5,... --out DIR
    apex viz-mem     --ckpt DIR --bench DIR --out DIR [--split ...]

Outputs are plain CSV, binary tensors, and PGM dumps; nothing carries
timestamps, so reruns with equal seeds are byte-identical.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as cfgmod
from . import harness, prompting, synthdata, tensorio
from .errors import ApexError


def _load_configs(path: str | None):
    kv = cfgmod.load_file(path) if path else {}
    return cfgmod.build_configs(kv)


def _write(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _load_bench(bench_dir: str) -> synthdata.Benchmark:
    kv = cfgmod.load_file(Path(bench_dir) / "config.txt")
    seed = int(kv.get("bench_seed", "0"))
    _, bench_cfg = cfgmod.build_configs(kv)
    return synthdata.load_benchmark(bench_dir, bench_cfg, seed)


def _backbone_for(bench: synthdata.Benchmark) -> synthdata.FrozenBackbone:
    return synthdata.backbone_calibrate(bench.splits["source_cal"])


def cmd_gen_bench(args) -> int:
    train_cfg, bench_cfg = _load_configs(args.config)
    bench = synthdata.build_benchmark(bench_cfg, args.seed)
    out = Path(args.out)
    synthdata.save_benchmark(bench, out)
    _write(out / "config.txt",
           cfgmod.echo_lines(train_cfg, bench_cfg) + [f"bench_seed = {args.seed}"])
    if args.dump_samples > 0:
        preview = out / "previews"
        preview.mkdir(parents=True, exist_ok=True)
        for split in synthdata.Benchmark.SPLITS:
            for dom, samples in sorted(bench.by_domain(split).items()):
                for s in samples[:args.dump_samples]:
                    tensorio.write_pgm(preview / f"{s.sample_id}.pgm", s.image)
    print(f"benchmark written to {out} "
          f"({sum(len(s) for s in bench.splits.values())} samples)")
    return 0


def cmd_train(args) -> int:
    train_cfg, _ = _load_configs(args.config)
    bench = _load_bench(args.bench)
    backbone = _backbone_for(bench)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.txt", cfgmod.echo_lines(train_cfg, bench.config)
           + [f"bench_seed = {bench.seed}"])
    _write(out / "backbone.txt", [
        f"threshold = {backbone.threshold!r}",
        f"slope = {backbone.slope!r}",
        f"blur_radius = {backbone.blur_radius}",
        f"digest = {backbone.digest()}"])

    metric_lines = ["seed,scope,dice,iou"]
    per_seed = []
    for seed in train_cfg.seeds:
        state, log = harness.train(train_cfg, bench, backbone, seed)
        seed_dir = out / f"seed{seed}"
        prompting.save_state(state, seed_dir)
        harness.write_step_log(log, seed_dir / "steps.csv")
        seen = harness.evaluate(state, backbone, bench, "seen")
        unseen = harness.evaluate(state, backbone, bench, "unseen")
        for rep in (seen, unseen):
            for dom in sorted(rep.per_domain):
                row = rep.per_domain[dom]
                metric_lines.append(f"{seed},{dom},{row['dice']!r},{row['iou']!r}")
        triple = (seen.avg_seen, unseen.avg_unseen,
                  harness.RunResult(seed, state, log, seen, unseen).avg_total)
        per_seed.append(triple)
        for name, val in zip(("avg_seen", "avg_unseen", "avg_total"), triple):
            metric_lines.append(f"{seed},{name},{val!r},")
        print(f"seed {seed}: seen {triple[0]:.2f} unseen {triple[1]:.2f} "
              f"total {triple[2]:.2f}")
    for i, name in enumerate(("avg_seen", "avg_unseen", "avg_total")):
        m, s = harness.mean_std([t[i] for t in per_seed])
        metric_lines.append(f"mean,{name},{m!r},")
        metric_lines.append(f"std,{name},{s!r},")
    _write(out / "metrics.csv", metric_lines)
    print(f"checkpoints and metrics written to {out}")
    return 0


def cmd_eval(args) -> int:
    bench = _load_bench(args.bench)
    backbone = _backbone_for(bench)
    state = None if args.source_only else prompting.load_state(args.ckpt)
    report = harness.evaluate(state, backbone, bench, args.split,
                              source_only=args.source_only)
    lines = report.csv_lines()
    for line in lines:
        print(line)
    if args.out:
        _write(Path(args.out), lines)
    return 0


def cmd_ablate(args) -> int:
    train_cfg, _ = _load_configs(args.config)
    bench = _load_bench(args.bench)
    backbone = _backbone_for(bench)
    lines = harness.run_ablation(train_cfg, bench, backbone)
    out = Path(args.out)
    _write(out / "ablation.csv", lines)
    for line in lines:
        print(line)
    return 0


def cmd_sweep_slots(args) -> int:
    train_cfg, _ = _load_configs(args.config)
    bench = _load_bench(args.bench)
    backbone = _backbone_for(bench)
    j_list = tuple(int(v) for v in args.j_list.split(","))
    lines = harness.slot_sweep(train_cfg, bench, backbone, j_list)
    out = Path(args.out)
    _write(out / "slot_sweep.csv", lines)
    for line in lines:
        print(line)
    return 0


def cmd_viz_mem(args) -> int:
    if args.out is None:
        args.out = str(Path(args.ckpt) / "viz")
    bench = _load_bench(args.bench)
    state = prompting.load_state(args.ckpt)
    samples = []
    for split in args.split.split(","):
        name = harness.SPLIT_NAMES.get(split, split)
        samples.extend(bench.splits[name])
    within, cross = harness.export_activations(state, samples, args.out)
    print(f"within-domain mean Jaccard {within!r}, cross-domain {cross!r}")
    print(f"activation maps written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apex",
                                     description="Adaptive frequency-domain prompting harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bench", help="generate the synthetic benchmark")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-samples", type=int, default=0, metavar="N",
                   help="also write the first N images per domain/split as PGM")
    p.set_defaults(func=cmd_gen_bench)

    p = sub.add_parser("train", help="train one state per configured seed")
    p.add_argument("--config", default=None)
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--bench", required=True)
    p.add_argument("--split", choices=sorted(harness.SPLIT_NAMES), required=True)
    p.add_argument("--source-only", action="store_true",
                   help="skip prompting; raw images into the backbone")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="memory/contrastive ablation grid")
    p.add_argument("--config", default=None)
    p.add_argument("--bench", required=True)
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-slots", help="slot-count sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--bench", required=True)
    p.add_argument("--j-list", default="1,5,25,75,150,300")
    p.add_argument("--out", default="slot_sweep")
    p.set_defaults(func=cmd_sweep_slots)

    p = sub.add_parser("viz-mem", help="export activated-slot maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--split", default="unseen",
                   help="comma-separated splits (seen, unseen, source)")
    p.add_argument("--out", default=None,
                   help="output directory (default: <ckpt>/viz)")
    p.set_defaults(func=cmd_viz_mem)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "eval" and not args.source_only and not args.ckpt:
        print("eval: --ckpt is required unless --source-only is given", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ApexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
