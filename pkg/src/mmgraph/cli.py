"""Command-line entry point: ``mmgraph <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Every command accepts ``--config FILE`` (``key = value`` lines, ``#`` comments,
keys are flag names) and ``--seed``; explicit flags override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from mmgraph import io
from mmgraph.embeddings import EpisodeError, SynthConfig, class_names, synth_dataset
from mmgraph.graph import GraphError, export_graph
from mmgraph.model import VARIANTS, EpisodeFeatures, ModelConfig, ModelParams, build_episode_graphs, forward, init_params
from mmgraph.train import TrainConfig, ablate, ablation_table, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ABLATION_LR = 1e-3
ABLATION_EPOCHS = 30


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise io.MissingFileError(f"missing config file: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    p.add_argument("--hidden", type=int, default=d.hidden, help="GAT width and shared-space size")
    p.add_argument("--layers", type=int, default=d.layers, help="number of GAT layers")
    p.add_argument("--spatial-threshold", type=float, default=d.spatial_threshold,
                   help="cosine needed for an object-object edge")
    p.add_argument("--semantic-threshold", type=float, default=d.semantic_threshold,
                   help="shared-space cosine needed for a text-object edge")
    p.add_argument("--prune-threshold", type=float, default=d.prune_threshold, help="prune edges below this weight")
    p.add_argument("--add-threshold", type=float, default=d.add_threshold, help="add candidate edges at this cosine")
    p.add_argument("--weighted-messages", type=_bool, default=d.weighted_messages,
                   help="scale messages by refined edge weights (true/false)")


def _train_flags(p: argparse.ArgumentParser, lr: float | None = None) -> None:
    d = TrainConfig()
    p.add_argument("--variant", choices=VARIANTS, default=d.variant, help="ablation variant")
    p.add_argument("--epochs", type=int, default=d.epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="episodes per minibatch")
    p.add_argument("--lr", type=float, default=d.base_lr if lr is None else lr, help="peak learning rate")
    p.add_argument("--warmup", type=int, default=d.warmup, help="linear warm-up epochs")
    p.add_argument("--val-fraction", type=float, default=d.val_fraction, help="stratified validation share")
    _model_flags(p)


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="mmgraph", description="Dynamic multimodal graph attention for action recognition.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file mirroring these flags")
        p.add_argument("--seed", type=int, default=7, help="random seed")
        return p

    g = command("gen-data", "Write a synthetic episode dataset directory.")
    d = SynthConfig()
    g.add_argument("--classes", type=int, default=d.num_classes, help="number of action classes")
    g.add_argument("--episodes", type=int, default=d.episodes_per_class, help="episodes per class")
    g.add_argument("--frames", type=int, default=d.frames, help="frames per episode")
    g.add_argument("--patches", type=int, default=d.patches, help="patches per frame")
    g.add_argument("--objects", type=int, default=d.objects, help="object regions per frame")
    g.add_argument("--dv", type=int, default=d.d_v, help="visual embedding size")
    g.add_argument("--dt", type=int, default=d.d_t, help="text embedding size")
    g.add_argument("--noise", type=float, default=d.noise_std, help="Gaussian noise std")
    g.add_argument("--out", required=True, help="output directory")

    t = command("train", "Train one variant; write checkpoint and metrics.")
    t.add_argument("--data", required=True, help="dataset directory or dataset.json")
    t.add_argument("--out", required=True, help="output directory")
    _train_flags(t)

    e = command("eval", "Evaluate a checkpoint on a dataset.")
    e.add_argument("--data", required=True, help="dataset directory or dataset.json")
    e.add_argument("--checkpoint", required=True, help="checkpoint manifest (.json)")
    e.add_argument("--out", help="metrics file (default: stdout)")

    a = command("ablate", "Train all four variants over several seeds and tabulate.")
    a.add_argument("--data", required=True, help="dataset directory or dataset.json")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--seeds", default="7,8,9", help="comma-separated seeds")
    # the graph variants need the larger step to converge on every seed within 30 epochs
    _train_flags(a, lr=ABLATION_LR)
    a.set_defaults(epochs=ABLATION_EPOCHS)

    x = command("export-graph", "Emit the (adapted) graph of one episode.")
    x.add_argument("--episode", required=True, help="episode manifest, or dataset path with --index")
    x.add_argument("--index", type=int, default=0, help="episode index when --episode is a dataset")
    x.add_argument("--checkpoint", help="checkpoint manifest; omitted -> freshly initialised model")
    x.add_argument("--variant", choices=VARIANTS, default="full", help="variant when no checkpoint is given")
    x.add_argument("--format", choices=("dot", "structured"), default="dot", help="output format")
    x.add_argument("--out", help="output file (default: stdout)")
    _model_flags(x)

    c = command("grad-check", "Finite-difference check of every parameter group.")
    c.add_argument("--tolerance", type=float, default=1e-3, help="max relative error allowed")
    c.add_argument("--step", type=float, default=1e-6, help="central-difference step")
    c.add_argument("--weighted-messages", type=_bool, default=True,
                   help="include weight-scaled messages so lambda carries gradient")

    i = command("inspect", "Print an episode, dataset or checkpoint manifest summary.")
    i.add_argument("path", help="manifest path or dataset directory")
    return parser


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in values.items():
            if key not in known or key in ("help", "config"):
                raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
            action = known[key]
            try:
                value = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key!r}: {exc}") from exc
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{args.config}: {key!r} must be one of {list(action.choices)}")
            defaults[key] = value
            action.required = False
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _model_config(args) -> ModelConfig:
    return ModelConfig(hidden=args.hidden, layers=args.layers, spatial_threshold=args.spatial_threshold,
                       semantic_threshold=args.semantic_threshold, prune_threshold=args.prune_threshold,
                       add_threshold=args.add_threshold, weighted_messages=args.weighted_messages)


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr, warmup=args.warmup,
                       seed=seed, variant=args.variant, val_fraction=args.val_fraction, model=_model_config(args))


def _num_classes(episodes, meta) -> int:
    k = meta.get("num_classes")
    return int(k) if k is not None else max(ep.class_id for ep in episodes) + 1


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        io.write_text(Path(out), text)
    else:
        sys.stdout.write(text)


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(num_classes=args.classes, episodes_per_class=args.episodes, frames=args.frames,
                      patches=args.patches, objects=args.objects, d_v=args.dv, d_t=args.dt,
                      noise_std=args.noise, seed=args.seed)
    episodes = synth_dataset(cfg)
    meta = {"synth_config": asdict(cfg), "num_classes": cfg.num_classes,
            "class_names": class_names(cfg.num_classes)}
    path = io.save_dataset(episodes, args.out, meta)
    print(f"wrote {len(episodes)} episodes to {path.parent}")
    return EXIT_OK


def cmd_train(args) -> int:
    episodes, meta = io.load_dataset(args.data)
    cfg = _train_config(args, args.seed)
    res = train(episodes, cfg, _num_classes(episodes, meta))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(res.params.arrays(), out / "checkpoint.json", res.params.meta())
    report = {
        "variant": cfg.variant,
        "best_epoch": res.best_epoch,
        "train": res.train_metrics.to_dict(),
        "val": res.val_metrics.to_dict(),
        "history": res.history_dicts(),
        "config": {**asdict(cfg)},
    }
    io.write_text(out / "metrics.json", io.dump_json(report))
    print(f"{cfg.variant}: best epoch {res.best_epoch}, train acc {res.train_metrics.accuracy:.3f}, "
          f"val acc {res.val_metrics.accuracy:.3f}")
    return EXIT_OK


def load_params(path) -> ModelParams:
    arrays, meta = io.load_checkpoint(path)
    return ModelParams.from_arrays(arrays, meta)


def cmd_eval(args) -> int:
    episodes, _ = io.load_dataset(args.data)
    params = load_params(args.checkpoint)
    metrics = evaluate(params, episodes)
    _emit(io.dump_json({"variant": params.variant, "metrics": metrics.to_dict()}), args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    episodes, meta = io.load_dataset(args.data)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError as exc:
        raise UsageError(f"--seeds: {exc}") from exc
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    rows = ablate(episodes, _train_config(args, seeds[0]), seeds, _num_classes(episodes, meta))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ablation_table(rows)
    io.write_text(out / "ablation.txt", table)
    io.write_text(out / "ablation.json", io.dump_json({"seeds": list(seeds), "rows": [asdict(r) for r in rows]}))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_export_graph(args) -> int:
    path = Path(args.episode)
    if path.is_dir() or path.name == "dataset.json":
        episodes, _ = io.load_dataset(path)
        if not 0 <= args.index < len(episodes):
            raise io.IndexRangeError(f"--index {args.index} outside dataset of {len(episodes)}")
        episode = episodes[args.index]
    else:
        episode = io.load_episode(path)
    if args.checkpoint:
        params = load_params(args.checkpoint)
    else:
        params = init_params(episode.d_v, episode.d_t, episode.class_id + 1, _model_config(args),
                             args.variant, seed=args.seed)
    feats = [EpisodeFeatures.of(episode)]
    graphs = build_episode_graphs(feats, params, params.variant)
    forward(feats, params, params.variant, graphs)  # leaves refined weights on the edges
    _emit(export_graph(graphs[0], args.format), args.out)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from mmgraph.gradcheck import check_gradients

    report = check_gradients(seed=args.seed, h=args.step, weighted_messages=args.weighted_messages)
    for line in report.lines():
        print(line)
    print(f"worst max_rel_err={report.worst:.3e} tolerance={args.tolerance:.1e}")
    if not report.worst < args.tolerance:
        raise NumericFailure(f"gradient check failed: {report.worst:.3e} >= {args.tolerance:.1e}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "dataset.json"
    doc = io.read_json(path)
    fmt = doc.get("format")
    if fmt == io.DATASET_FORMAT:
        print(f"dataset: {len(doc['episodes'])} episodes")
        print(io.dump_json(doc.get("meta", {})), end="")
    elif fmt == io.EPISODE_FORMAT:
        ep = io.load_episode(path)
        n_obj = sum(len(r) for r in ep.regions)
        print(f"episode: label={ep.annotation!r} class_id={ep.class_id} T={ep.num_frames} "
              f"N={ep.num_patches} d_V={ep.d_v} d_T={ep.d_t} objects={n_obj}")
    elif fmt == io.CHECKPOINT_FORMAT:
        arrays, meta = io.load_checkpoint(path)
        print(f"checkpoint: variant={meta.get('variant')} classes={meta.get('num_classes')} "
              f"tensors={len(arrays)} values={sum(a.size for a in arrays.values())}")
        for name in sorted(arrays):
            a = arrays[name]
            print(f"  {name:<24} shape={list(a.shape)} norm={float(np.linalg.norm(a)):.6g}")
    else:
        raise io.HeaderMismatchError(f"{path}: unknown format {fmt!r}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-graph": cmd_export_graph,
    "grad-check": cmd_grad_check,
    "inspect": cmd_inspect,
}


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except io.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (io.FormatError, EpisodeError, GraphError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
