"""Command-line front end.

Subcommands: ``train``, ``classify``, ``attack``, ``eval``, ``matrix`` and
``dram-check``.  Values may come from an INI file (``--config``); a section
named after the subcommand supplies defaults and explicit flags win.  Outputs
go to ``--out-dir`` (default ``$KEYFLIP_OUT_DIR`` or ``./keyflip-out``) and are
written through a temp file and rename.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_DESTABILIZED = 4
EXIT_INFEASIBLE = 5
EXIT_FAILURE = 6

OUT_ENV = "KEYFLIP_OUT_DIR"
DEFAULT_OUT = "keyflip-out"

log = logging.getLogger("keyflip")


class ConfigError(Exception):
    pass


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _require_file(path, what: str) -> Path:
    if not path:
        raise ConfigError(f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _prepare_out(args) -> Path:
    out = _out_dir(args)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output dir {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output dir not writable: {out}")
    return out


def _write(path: Path, text: str) -> None:
    from .checkpoint import atomic_write_bytes

    atomic_write_bytes(path, text.encode())


def _world_and_tok(vocab=None):
    from .corpus import Tokenizer, build_tokenizer, build_world

    world = build_world()
    tok = Tokenizer.from_vocab(vocab) if vocab else build_tokenizer(world)
    return world, tok


# --- subcommands ------------------------------------------------------------

def cmd_train(args) -> int:
    from . import checkpoint
    from .corpus import write_corpus
    from .training import TrainConfig, TrainingGateError, train_toy

    if args.format not in ("bf16", "int8"):
        raise ConfigError(f"unknown format {args.format!r}")
    out = _prepare_out(args)
    world, tok = _world_and_tok()
    cfg = TrainConfig(seed=args.seed, steps=args.steps, fmt=args.format)
    try:
        res = train_toy(world, tok, cfg)
    except TrainingGateError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    name = args.checkpoint or f"victim-s{args.seed}-{args.format}.kflp"
    checkpoint.save(res.model, out / name, tok.vocab)
    if args.corpus:
        write_corpus(world, out / args.corpus)
    summary = {"checkpoint": name, "seed": args.seed, "steps": args.steps, "format": args.format,
               "float_accuracy": res.float_accuracy, "quant_accuracy": res.quant_accuracy,
               "final_loss": res.final_loss, "digest": res.model.digest()}
    _write(out / "train.json", json.dumps(summary, indent=2) + "\n")
    print(f"checkpoint {out / name}: held-in EM fp32 {res.float_accuracy:.3f}, "
          f"{args.format} {res.quant_accuracy:.3f}")
    return EXIT_OK


def cmd_classify(args) -> int:
    from . import checkpoint
    from .corpus import answer_ids, prompt_ids
    from .objective import classification_table, classify_keyword, read_sample_file, write_sample_file
    from .scenario import default_records, is_entity

    ckpt = _require_file(args.checkpoint, "checkpoint")
    if args.pick is None:
        records = read_sample_file(_require_file(args.samples, "sample file"))
    out = _prepare_out(args)
    model, vocab = checkpoint.load(ckpt)
    world, tok = _world_and_tok(vocab)
    if args.pick is not None:
        records = default_records(model, tok, world, args.pick, args.k)
        name = args.samples or f"samples-{args.pick}.json"
        write_sample_file(records, out / Path(name).name)
    report, lines = [], []
    for rec in records:
        p, a = prompt_ids(tok, rec["question"]), answer_ids(tok, rec["true_answer"])
        cls = classify_keyword(model, tok, p, a, tok.encode(rec["keywords"]), args.k)
        table = classification_table(cls, tok, is_entity)
        report.append({"question": rec["question"], "keywords": rec["keywords"],
                       "class": cls.relevance.value, "anchor_step": cls.anchor_step,
                       "initial_token": tok.token(cls.initial_token), "rank": cls.rank,
                       "anchor_logit": cls.anchor_logit, "topk": table})
        lines.append(f"{rec['question']}\n  keyword {rec['keywords']!r}: {cls.relevance.value} "
                     f"(rank {cls.rank}, logit {cls.anchor_logit:.4f})")
        lines.append("  rank  token            logit     legit")
        lines += [f"  {r['rank']:>4}  {r['token']:<15}  {r['logit']:>8.4f}  {'yes' if r['legit'] else 'no'}"
                  for r in table]
    _write(out / "classify.json", json.dumps(report, indent=2) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _attack_config(args):
    from .engine import AttackConfig
    from .search import SearchRange

    try:
        return AttackConfig(max_flips=args.max_flips, k=args.k, search_range=SearchRange.parse(args.range),
                            strategy=args.strategy, benign_weight=args.benign_weight,
                            aux_subsample=args.aux_subsample,
                            protected=tuple(p for p in (args.protected or "").split(",") if p),
                            seed=args.seed, selection=args.selection, refresh_bounds=not args.frozen_bounds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_attack(args) -> int:
    from . import checkpoint
    from .engine import Status, run_attack, write_plan
    from .evaluation import eval_tasks, evaluate_all
    from .objective import build_sample, read_sample_file
    from .plotting import write_series
    from .ranking import build_aux

    ckpt = _require_file(args.checkpoint, "checkpoint")
    records = read_sample_file(_require_file(args.samples, "sample file"))
    cfg = _attack_config(args)
    model, vocab = checkpoint.load(ckpt)
    try:
        cfg.search_range.resolve(model, cfg.protected)
    except KeyError as exc:
        raise ConfigError(f"unknown protected layer {exc}") from exc
    out = _prepare_out(args)
    world, tok = _world_and_tok(vocab)
    sample = build_sample(model, tok, records, cfg.max_new)
    aux = build_aux(world, tok, args.aux) if cfg.strategy == "impact_aux" else None
    tasks = eval_tasks(world, tok)
    pre = evaluate_all(model, tasks) if args.evaluate else None
    report = run_attack(model, sample, cfg, aux)
    doc = report.to_dict()
    if pre is not None:
        doc["pre_metrics"] = pre
        doc["post_metrics"] = evaluate_all(model, tasks)
    _write(out / "report.json", json.dumps(doc, indent=2, default=str) + "\n")
    _write(out / "iterations.csv", report.to_csv())
    write_plan(model, report.plan, out / "plan.json")
    write_series(report, out / "series.csv", out / "series.png", f"{cfg.strategy} / {cfg.search_range}")
    if args.save_model:
        checkpoint.save(model, out / "attacked.kflp", vocab)
    print(f"status {report.status.value} after {report.total_flips} flips"
          + (f" ({report.note})" if report.note else ""))
    return {Status.SUCCESS: EXIT_OK, Status.BUDGET_EXHAUSTED: EXIT_BUDGET,
            Status.DESTABILIZED: EXIT_DESTABILIZED}[report.status]


def cmd_eval(args) -> int:
    from . import checkpoint
    from .engine import read_plan, replay_plan
    from .evaluation import eval_tasks, evaluate_all

    ckpt = _require_file(args.checkpoint, "checkpoint")
    plan = read_plan(_require_file(args.plan, "plan")) if args.plan else None
    out = _prepare_out(args)
    model, vocab = checkpoint.load(ckpt)
    if plan is not None:
        replay_plan(model, plan)
    world, tok = _world_and_tok(vocab)
    metrics = evaluate_all(model, eval_tasks(world, tok))
    _write(out / "eval.json", json.dumps({"checkpoint": str(ckpt), "plan": args.plan, "digest": model.digest(),
                                          "metrics": metrics}, indent=2) + "\n")
    for k, v in metrics.items():
        print(f"{k:<10} {v:.4f}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    from .matrix import default_cells, run_experiment_matrix

    ckpt = _require_file(args.checkpoint, "checkpoint")
    samples = {}
    for item in args.samples or []:
        label, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--samples expects label=path, got {item!r}")
        samples[label] = str(_require_file(path, "sample file"))
    if not samples:
        raise ConfigError("matrix needs at least one --samples label=path")
    out = _prepare_out(args)
    from . import checkpoint

    _, vocab = checkpoint.load(ckpt)
    world, tok = _world_and_tok(vocab)
    cells = default_cells(str(ckpt), samples, args.seed, tuple(args.strategies.split(",")),
                          tuple(args.ranges.split(",")))
    rows, text = run_experiment_matrix(cells, world, tok)
    _write(out / "matrix.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_dram_check(args) -> int:
    from . import checkpoint
    from .dram import PROFILED_PAGES, generate_profile, match_plan, model_requirements, PlanLayoutError
    from .engine import read_plan

    ckpt = _require_file(args.checkpoint, "checkpoint")
    plan = read_plan(_require_file(args.plan, "plan"))
    model, _ = checkpoint.load(ckpt)
    try:
        reqs = model_requirements(model, plan)
    except PlanLayoutError as exc:
        raise ConfigError(str(exc)) from exc
    out = _prepare_out(args)
    profile = generate_profile(args.profile_seed, args.pages or PROFILED_PAGES)
    placement = match_plan(reqs, profile)
    doc = placement.to_dict()
    doc.update(profile_seed=args.profile_seed, profile_pages=profile.page_count, profile_cells=len(profile))
    _write(out / "placement.json", json.dumps(doc, indent=2) + "\n")
    print(f"{placement.status.value}: {len(placement.satisfied)}/{len(reqs)} flips placed "
          f"on {len(placement.assignments)} pages")
    return EXIT_OK if placement.feasible else EXIT_INFEASIBLE


# --- argument handling --------------------------------------------------------

COMMANDS = {"train": cmd_train, "classify": cmd_classify, "attack": cmd_attack, "eval": cmd_eval,
            "matrix": cmd_matrix, "dram-check": cmd_dram_check}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="keyflip", description="Targeted bit-flip attack on a toy language model.")
    parser.add_argument("--config", help="INI file; section [<command>] supplies defaults")
    parser.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train and quantize the toy victim")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--format", default="bf16", help="bf16 or int8")
    p.add_argument("--checkpoint", help="output checkpoint file name")
    p.add_argument("--corpus", help="also write the corpus as JSONL under this name")

    p = sub.add_parser("classify", help="relevant/irrelevant keyword report")
    p.add_argument("--checkpoint")
    p.add_argument("--samples", help="sample file to classify, or the name to write with --pick")
    p.add_argument("--pick", choices=("relevant", "irrelevant"), help="choose keywords and write a sample file")
    p.add_argument("--k", type=int, default=20)

    p = sub.add_parser("attack", help="run the iterative attack")
    p.add_argument("--checkpoint")
    p.add_argument("--samples")
    p.add_argument("--strategy", default="impact_aux",
                   choices=("impact_aux", "impact_noaux", "grad_inrange", "grad_unconstrained"))
    p.add_argument("--range", default="head", help="head, full or tail:<ratio>")
    p.add_argument("--max-flips", type=int, default=50)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--aux", default="accuracy", choices=("accuracy", "loss"))
    p.add_argument("--aux-subsample", type=int, default=32)
    p.add_argument("--benign-weight", type=float, default=1.0)
    p.add_argument("--selection", default="equation", choices=("equation", "paper-text"))
    p.add_argument("--protected", help="comma-separated layer names excluded from search")
    p.add_argument("--frozen-bounds", action="store_true", help="keep pre-attack layer ranges for the constraint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--evaluate", action="store_true", help="record pre/post task metrics")
    p.add_argument("--save-model", action="store_true", help="also write the attacked checkpoint")

    p = sub.add_parser("eval", help="task metrics, optionally after replaying a plan")
    p.add_argument("--checkpoint")
    p.add_argument("--plan")

    p = sub.add_parser("matrix", help="strategy x keyword x range experiment grid")
    p.add_argument("--checkpoint")
    p.add_argument("--samples", action="append", help="label=path, repeatable")
    p.add_argument("--strategies", default="impact_aux,impact_noaux,grad_inrange")
    p.add_argument("--ranges", default="head,tail:0.5,full")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("dram-check", help="page-placement feasibility of a flip plan")
    p.add_argument("--checkpoint")
    p.add_argument("--plan")
    p.add_argument("--profile-seed", type=int, default=0)
    p.add_argument("--pages", type=int, help="physical pages in the profile (default: 4 GiB)")
    return parser


def _apply_config_file(parser, argv, command: str, path: str) -> argparse.Namespace:
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise ConfigError(f"config file not found: {path}")
    except configparser.Error as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from exc
    subparser = parser._subparsers._group_actions[0].choices[command]
    dests = {a.dest: a for a in subparser._actions if a.dest != "help"}
    defaults = {}
    for section in ("common", command):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest == "out_dir" and section == "common":
                defaults["out_dir"] = raw
                continue
            if dest not in dests:
                if section == "common":
                    continue
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            action = dests[dest]
            if isinstance(action, argparse._StoreTrueAction):
                value = cp.getboolean(section, key)
            elif isinstance(action, argparse._AppendAction):
                value = raw.split()
            else:
                try:
                    value = action.type(raw) if action.type else raw
                except ValueError as exc:
                    raise ConfigError(f"{path}: bad value for {key}: {raw!r}") from exc
                if action.choices and value not in action.choices:
                    raise ConfigError(f"{path}: {key} must be one of {list(action.choices)}")
            defaults[dest] = value
    out_dir = defaults.pop("out_dir", None)
    subparser.set_defaults(**defaults)
    if out_dir is not None:
        parser.set_defaults(out_dir=out_dir)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config_file(parser, argv, args.command, args.config)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"keyflip: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError) as exc:  # malformed sample, plan or checkpoint files
        print(f"keyflip: config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
