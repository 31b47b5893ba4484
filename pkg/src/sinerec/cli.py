"""Command-line entry point: ``sinerec <command> [--config PATH] [key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError
from .data import DataError, generate_synthetic, load_interactions, load_item_labels, split_leave_one_out, \
    write_interactions
from .evaluation import evaluate
from .gradcheck import run_gradcheck
from .retrieval import ItemIndex, concept_neighbors, retrieve_for_user
from .training import TrainingDiverged, train

log = logging.getLogger("sinerec")

CHECKPOINT_NAME = "model.sine"


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def _resolve(args) -> dict:
    layers = []
    if args.preset:
        layers.append(cfgmod.read_preset(args.preset))
    if args.config:
        layers.append(cfgmod.read_config(args.config))
    layers.append(cfgmod.parse_lines(args.overrides, "<command line>"))
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.threads is not None:
        flags["threads"] = args.threads
    layers.append(flags)
    return cfgmod.resolve(*layers)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg: dict):
    path = cfg["data"]
    if not path:
        raise CliError("no data file configured (set data=PATH)")
    if not Path(path).is_file():
        raise CliError(f"data file not found: {path}")
    log_ = load_interactions(path, cfg["min_user_len"])
    if cfg["labels"]:
        if not Path(cfg["labels"]).is_file():
            raise CliError(f"label file not found: {cfg['labels']}")
        log_.item_labels = load_item_labels(cfg["labels"], log_)
    return log_


def _checkpoint_path(cfg: dict, out: Path) -> Path:
    path = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / CHECKPOINT_NAME
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    return path


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    tc = cfgmod.train_config(cfg)
    (out / "config.resolved").write_text(cfgmod.dump(cfg), encoding="utf-8")
    data = _load_data(cfg)
    seqs = split_leave_one_out(data)
    with open(out / "train.log", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# model={tc.model} mode={tc.aggregation_mode} seed={tc.seed} users={data.num_users} "
                 f"items={data.num_items} min_user_len={cfg['min_user_len']} negatives={tc.negatives} "
                 f"sampled_softmax_correction=none epochs={tc.epochs} patience={tc.patience}\n")

        def emit(line):
            fh.write(line + "\n")
            fh.flush()
            print(line)

        try:
            result = train(tc, seqs, data.num_items, on_log=emit)
        except TrainingDiverged as exc:
            raise CliError(str(exc), code=3) from None
    save_checkpoint(out / CHECKPOINT_NAME, result.params, data.user_ids, data.item_ids)
    print(f"best val HR@{tc.val_cutoff}={result.best_val_hr:.6f} at step {result.best_step}; "
          f"checkpoint {out / CHECKPOINT_NAME}")
    return 0


def _load_model(cfg: dict, out: Path, data=None):
    try:
        params, vocab = load_checkpoint(_checkpoint_path(cfg, out))
    except CheckpointError as exc:
        raise CliError(str(exc)) from None
    if data is not None and (vocab["items"] != data.item_ids or vocab["users"] != data.user_ids):
        raise CliError("checkpoint vocabulary does not match the configured data file")
    return params, vocab


def _mode(cfg: dict, params) -> str:
    if params.config.kind == "baseline":
        return "adaptive"
    return cfg["mode"] or cfg["aggregation_mode"]


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    data = _load_data(cfg)
    params, _ = _load_model(cfg, out, data)
    report = evaluate(params, split_leave_one_out(data), cfgmod.cutoffs(cfg), split="test",
                      mode=_mode(cfg, params), threads=cfg["threads"], item_labels=data.item_labels)
    text = report.text()
    (out / "eval_report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_retrieve(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    data = _load_data(cfg)
    params, _ = _load_model(cfg, out, data)
    index = ItemIndex(params["H"], data.item_ids)
    users = data.user_index()
    mode = _mode(cfg, params)
    for uid in [u.strip() for u in args.users.split(",") if u.strip()]:
        if uid not in users:
            print(f"warning: unknown user {uid!r}", file=sys.stderr)
            continue
        items = retrieve_for_user(params, data.sequences[users[uid]], args.top, index, mode)
        for rank, (j, score) in enumerate(items, start=1):
            print(f"{uid}\t{rank}\t{data.item_id(j)}\t{score:.6f}")
    return 0


def cmd_inspect_concepts(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    params, vocab = _load_model(cfg, out)
    if "C" not in params.tensors:
        raise CliError("checkpoint has no concept prototypes (baseline model)")
    index = ItemIndex(params["H"])
    L = params["C"].shape[0]
    concepts = [args.concept] if args.concept is not None else range(L)
    for c in concepts:
        try:
            neighbors = concept_neighbors(params["C"], c, args.top, index)
        except IndexError as exc:
            raise CliError(str(exc)) from None
        for rank, (j, sim) in enumerate(neighbors, start=1):
            print(f"{c}\t{rank}\t{vocab['items'][j - 1]}\t{sim:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    result = run_gradcheck(seed=cfg["seed"], kind=cfg["model"], mode=cfg["aggregation_mode"])
    for line in result.lines():
        print(line)
    return 0 if result.passed else 1


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    corpus = generate_synthetic(cfgmod.synthetic_spec(cfg))
    write_interactions(corpus.log, out / "interactions.tsv", out / "item_labels.tsv")
    (out / "config.resolved").write_text(cfgmod.dump(cfg), encoding="utf-8")
    print(f"wrote {corpus.log.num_users} users, {corpus.log.num_items} items to {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "inspect-concepts": cmd_inspect_concepts,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinerec", description="Sparse-interest sequential recommender")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--preset", choices=cfgmod.PRESETS, help="shipped hyperparameter preset")
        p.add_argument("--out", default="run", help="output directory (default: run)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("overrides", nargs="*", metavar="key=value")
        if name == "retrieve":
            p.add_argument("--users", required=True, help="comma-separated external user ids")
            p.add_argument("--top", type=int, default=10, help="items per user")
        if name == "inspect-concepts":
            p.add_argument("--top", type=int, default=8, help="items per concept")
            p.add_argument("--concept", type=int, help="only this prototype row")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    # overrides may also follow options, where argparse leaves them unparsed
    stray = [a for a in rest if "=" not in a or a.startswith("-")]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    args.overrides = list(args.overrides) + rest
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "code", 2)


if __name__ == "__main__":
    sys.exit(main())
