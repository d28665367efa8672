"""Command-line driver: ``lmcgnn {gen-data,partition,train,grad-error}``."""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

from lmcgnn.config import load_config
from lmcgnn.exceptions import ConfigError, DivergenceError, GraphFormatError
from lmcgnn.experiments import build_graph, grad_error, train, write_manifest
from lmcgnn.graph import save_graph
from lmcgnn.partition import partition_bfs, save_partition

logger = logging.getLogger("lmcgnn")


def _common(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", help="path to a 'key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--out-dir", help="output directory (overrides out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmcgnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("gen-data", help="write an SBM dataset as text files"), False)
    _common(sub.add_parser("partition", help="write partition.txt for the configured dataset"), False)
    _common(sub.add_parser("train", help="train one estimator, write metrics.csv and params.ckpt"), True)
    _common(sub.add_parser("grad-error", help="relative gradient errors of several estimators"), True)
    return parser


def _resolve(args):
    config = load_config(args.config, args.set)
    if args.seed is not None:
        config.seed = args.seed
        if args.command == "gen-data":
            config.data_seed = args.seed
    if args.out_dir:
        config.out_dir = args.out_dir
    return config.validate()


def cmd_gen_data(config) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.uses_files:
        raise ConfigError("gen-data builds an SBM; remove edges/features/labels from the config")
    g = build_graph(config)
    save_graph(g, out / "edges.txt", out / "features.txt", out / "labels.txt")
    write_manifest(out / "manifest.txt", config, g, "gen-data")
    hist = Counter(int(c) for c in g.labels)
    print(f"n={g.n} edges={g.n_edges} labeled={int(g.labeled_mask.sum())}")
    print("classes: " + " ".join(f"{c}:{hist[c]}" for c in sorted(hist)))
    return 0


def cmd_partition(config) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = build_graph(config)
    part = partition_bfs(g, config.B, config.seed)
    save_partition(part, out / "partition.txt")
    sizes = [len(c) for c in part.clusters]
    print(f"B={part.B} sizes min={min(sizes)} max={max(sizes)}")
    return 0


def cmd_train(config) -> int:
    result = train(config, config.out_dir)
    if result.diverged_at is not None:
        print(f"diverged at iteration {result.diverged_at}", file=sys.stderr)
        return 2
    f = result.final
    print(f"loss={f.full_batch_loss:.6g} train_acc={f.train_acc:.4f} "
          f"val_acc={f.val_acc:.4f} test_acc={f.test_acc:.4f} grad_norm={f.grad_norm:.4g}")
    return 0


def cmd_grad_error(config) -> int:
    result = grad_error(config, config.out_dir)
    for mode, s in result.summary.items():
        print(f"{mode}: mean relative error {s['rel_err_mean']:.6g}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "partition": cmd_partition,
    "train": cmd_train,
    "grad-error": cmd_grad_error,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _resolve(args)
        return COMMANDS[args.command](config)
    except (ConfigError, GraphFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
