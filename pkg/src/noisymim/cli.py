"""Command-line experiment surface.

Subcommands: make-data, pretrain, compare, analyze-attn, gradcheck.
Exit codes: 0 success, 1 experiment-level failure, 2 usage/config error,
3 numeric abort.  Every command writes one manifest.txt into its output
directory; NOISYMIM_THREADS caps how many compare arms run concurrently.
"""

from __future__ import annotations

import argparse
import os
import shlex
import statistics
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, verify
from .config import TrainConfig, apply_overrides, config_items, load_config, parse_config_text
from .corruption import STREAM_SYNTH, Rng
from .data import SynthSpec, build_synthetic_dataset, check_cifar10, write_cifar10
from .errors import ConfigError, DataError, FormatError, NoisyMimError, NumericsError
from .trainer import git_describe, load_dataset, load_encoder, pretrain, write_manifest

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

FIG9_GRID = """\
# Component ablation: baseline MIM, each addition, and the full method.
seeds = 0,1,2
[arm baseline-mim]
encoder.strategy = mim
encoder.noise_block = 0
encoder.denoise_weight = 0.0
encoder.disruption_weight = 0.0
[arm feature-noise]
encoder.strategy = hybrid
encoder.noise_block = 2
encoder.disruption_weight = 0.0
[arm disentangle]
encoder.strategy = hybrid
encoder.noise_block = 0
encoder.disruption_weight = 0.1
[arm full-method]
encoder.strategy = hybrid
encoder.noise_block = 2
encoder.disruption_weight = 0.1
"""


def _manifest_header(args_command: str) -> list[tuple[str, str]]:
    return [("command", args_command),
            ("start_time", time.strftime("%Y-%m-%dT%H:%M:%S")),
            ("git", git_describe())]


def cmd_make_data(args) -> int:
    out = Path(args.out)
    if args.kind == "cifar-check":
        files, records = check_cifar10(out)
        print(f"ok: {files} file(s), {records} records")
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(classes=args.classes, noise_std=args.noise_std)
    dataset = build_synthetic_dataset(spec, args.samples, Rng(args.seed, STREAM_SYNTH))
    data_path = out / "data.bin"
    write_cifar10(data_path, dataset.images, dataset.labels)
    label_lines = []
    for c in range(spec.classes):
        freq, theta = spec.high_freq_signature[c]
        label_lines.append(f"{c}=class_{c} palette={c // 2} freq={freq:.3f} orientation={theta:.3f}")
    (out / "labels.txt").write_text("\n".join(label_lines) + "\n")
    entries = _manifest_header(args.command_line)
    entries += [("seed", str(args.seed)),
                ("classes", str(args.classes)),
                ("samples_per_class", str(args.samples)),
                ("records", str(len(dataset))),
                ("artifact.data", str(data_path)),
                ("artifact.labels", str(out / "labels.txt")),
                ("end_time", time.strftime("%Y-%m-%dT%H:%M:%S"))]
    write_manifest(out / "manifest.txt", entries)
    print(f"wrote {len(dataset)} records ({len(dataset) * 3073} bytes) to {data_path}")
    return EXIT_OK


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.override:
        cfg = apply_overrides(cfg, args.override)
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    artifacts = pretrain(cfg, args.out, command_line=args.command_line)
    print(f"done: {artifacts.steps_run} steps, checkpoint at {artifacts.checkpoint_path}")
    return EXIT_OK


def _parse_grid(text: str):
    """Grid file: optional `seeds = ...`, optional `base.<key> = v` lines,
    then `[arm NAME]` sections of config overrides."""
    seeds = [0]
    base: dict[str, str] = {}
    arms: list[tuple[str, dict[str, str]]] = []
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[arm ") and line.endswith("]"):
            name = line[5:-1].strip()
            current = {}
            arms.append((name, current))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"grid line {lineno}: expected key=value, got {raw!r}")
        key, value = key.strip(), value.strip()
        if key == "seeds":
            seeds = [int(s) for s in value.split(",")]
        elif current is None:
            if not key.startswith("base."):
                raise ConfigError(f"grid line {lineno}: {key!r} outside an [arm] section "
                                  "(prefix shared overrides with 'base.')")
            base[key[5:]] = value
        else:
            current[key] = value
    if not arms:
        raise ConfigError("grid defines no arms")
    if len({name for name, _ in arms}) != len(arms):
        raise ConfigError("duplicate arm names in grid")
    return seeds, base, arms


def _run_arm(arm_name: str, overrides: dict[str, str], seed: int, out_dir: Path) -> dict:
    """Pretrain one arm in a subprocess, then probe its checkpoint."""
    run_dir = out_dir / "arms" / f"{arm_name}_s{seed}"
    cmd = [sys.executable, "-m", "noisymim.cli", "pretrain", "--out", str(run_dir), "--override",
           f"train.seed={seed}"] + [f"{k}={v}" for k, v in overrides.items()]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    result = {"arm": arm_name, "seed": seed, "dir": run_dir, "exit": proc.returncode}
    if proc.returncode != 0:
        result["error"] = (proc.stderr.strip().splitlines() or ["unknown failure"])[-1]
        return result
    try:
        enc, cfg = load_encoder(run_dir / "checkpoint.nmim")
        probe = analysis.linear_probe(enc, load_dataset(cfg), seed=0)
        result["train_acc"] = probe.train_acc
        result["test_acc"] = probe.test_acc
    except NoisyMimError as err:
        result["exit"] = EXIT_FAILURE
        result["error"] = str(err)
    return result


def cmd_compare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.grid == "paper-fig9":
        text = FIG9_GRID
    else:
        text = Path(args.grid).read_text()
    seeds, base, arms = _parse_grid(text)
    # validate overrides up front so typos exit 2 before any training
    for name, overrides in arms:
        apply_overrides(TrainConfig(), {**base, **overrides})

    jobs = [(name, {**base, **overrides}, seed) for name, overrides in arms for seed in seeds]
    workers = max(1, int(os.environ.get("NOISYMIM_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda j: _run_arm(j[0], j[1], j[2], out), jobs))

    by_key = {(r["arm"], r["seed"]): r for r in results}
    csv_lines = ["arm,seed,train_acc,test_acc,status"]
    table = [f"{'arm':<16} {'seed':>4} {'train_acc':>9} {'test_acc':>8}"]
    medians: list[tuple[str, float | None]] = []
    failed = False
    for name, _ in arms:
        accs = []
        for seed in seeds:
            r = by_key[(name, seed)]
            if "test_acc" in r:
                csv_lines.append(f"{name},{seed},{r['train_acc']!r},{r['test_acc']!r},ok")
                table.append(f"{name:<16} {seed:>4} {r['train_acc']:>9.4f} {r['test_acc']:>8.4f}")
                accs.append(r["test_acc"])
            else:
                failed = True
                csv_lines.append(f"{name},{seed},,,failed")
                table.append(f"{name:<16} {seed:>4} {'failed':>9} {'':>8}  # {r.get('error', '')}")
        medians.append((name, statistics.median(accs) if accs else None))
    table.append("")
    table.append(f"{'arm':<16} {'median test_acc':>15}")
    for name, med in medians:
        table.append(f"{name:<16} {'failed':>15}" if med is None else f"{name:<16} {med:>15.4f}")

    (out / "compare_table.csv").write_text("\n".join(csv_lines) + "\n")
    (out / "compare_table.txt").write_text("\n".join(table) + "\n")
    entries = _manifest_header(args.command_line)
    entries += [("grid", args.grid), ("seeds", ",".join(str(s) for s in seeds)),
                ("arms", ",".join(name for name, _ in arms)),
                ("artifact.table_csv", str(out / "compare_table.csv")),
                ("artifact.table_txt", str(out / "compare_table.txt")),
                ("end_time", time.strftime("%Y-%m-%dT%H:%M:%S"))]
    write_manifest(out / "manifest.txt", entries)
    print("\n".join(table))
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_analyze_attn(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    enc, cfg = load_encoder(args.checkpoint)
    if args.data:
        cfg_data = apply_overrides(cfg, {"data.kind": "cifar10", "data.path": args.data})
    else:
        cfg_data = cfg
    dataset = load_dataset(cfg_data)
    # held-out evaluation split: last 20% of a seeded permutation
    perm = Rng(0, STREAM_SYNTH + 7).permutation(len(dataset))
    held = perm[int(round(0.8 * len(dataset))):]
    batch_idx = held[:min(64, held.size)]
    images = dataset.normalized()[np.sort(batch_idx)]
    records = enc.clean_affinities(images)

    kl_records = analysis.head_kl_all(records)
    analysis.write_kl_csv(out / "kl_pairs.csv", kl_records)
    analysis.write_layer_means_csv(out / "kl_layer_means.csv", kl_records)
    (out / "kl_scatter.svg").write_text(analysis.kl_summary_svg(kl_records))

    layer = args.layer if args.layer is not None else enc.config.depth - 1
    query = args.query if args.query is not None else 0
    heat = analysis.attention_map(records, layer, query, cls_offset=enc.config.cls_offset)
    analysis.write_pgm(out / f"attn_layer{layer}_q{query}.pgm", heat)
    analysis.write_grid_csv(out / f"attn_layer{layer}_q{query}.csv", heat)

    entries = _manifest_header(args.command_line)
    entries += [("checkpoint", str(args.checkpoint)),
                ("eval_batch", str(batch_idx.size)),
                ("layer", str(layer)), ("query", str(query)),
                ("artifact.kl_pairs", str(out / "kl_pairs.csv")),
                ("artifact.kl_layer_means", str(out / "kl_layer_means.csv")),
                ("artifact.kl_scatter", str(out / "kl_scatter.svg")),
                ("artifact.heatmap", str(out / f"attn_layer{layer}_q{query}.pgm")),
                ("end_time", time.strftime("%Y-%m-%dT%H:%M:%S"))]
    write_manifest(out / "manifest.txt", entries)
    print(f"wrote KL diagnostics for {len(records)} layers to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else None
    corrupt = bool(os.environ.get("NOISYMIM_GRADCHECK_CORRUPT"))
    print(f"{'op family':<16} {'max rel err':>12}")
    worst_op = 0.0
    for name, err in verify.op_family_checks():
        print(f"{name:<16} {err:>12.3e}")
        worst_op = max(worst_op, err)
    print()
    print(f"{'component':<12} {'worst rel err':>14}  worst parameter")
    reports = verify.component_gradcheck(cfg, corrupt=corrupt)
    ok = worst_op < verify.THRESHOLD
    for rep in reports:
        print(f"{rep.name:<12} {rep.worst_err:>14.3e}  {rep.worst_param}")
        ok = ok and rep.passed
    if not ok:
        bad = [rep for rep in reports if not rep.passed]
        name = bad[0].worst_param if bad else "op family"
        print(f"FAIL: gradient mismatch above {verify.THRESHOLD:g} (parameter {name})")
        return EXIT_FAILURE
    print(f"OK: all gradients within {verify.THRESHOLD:g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisymim",
                                     description="Toy-scale masked/noised pre-training experiments")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("make-data", help="generate synthetic data or validate CIFAR-10 files")
    p.add_argument("--kind", choices=["synthetic", "cifar-check"], required=True)
    p.add_argument("--out", required=True,
                   help="output directory (for cifar-check: the directory/file to validate)")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--samples", type=int, default=100, help="samples per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("pretrain", help="run one pre-training configuration")
    p.add_argument("--config", help="key=value config file (defaults apply when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("compare", help="run a grid of pretrain arms and probe each")
    p.add_argument("--grid", required=True, help="grid file, or the built-in name 'paper-fig9'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze-attn", help="head-KL diagnostics and attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="CIFAR-format data directory (defaults to the checkpoint's dataset)")
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("--query", type=int)
    p.set_defaults(func=cmd_analyze_attn)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    args.command_line = "noisymim " + shlex.join(argv)
    try:
        return args.func(args)
    except NumericsError as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, NoisyMimError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
