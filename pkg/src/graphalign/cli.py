"""Command-line entry point.

Each subcommand reads an optional TOML config and lets flags override it.
Top-level keys name files (``graph``, ``data``, ``backbone``, ``init``,
``adapter``, ``out``, ``log``); the ``[tune]``, ``[toy]`` and ``[synthetic]``
tables configure training, the reference backbone and the synthetic graph.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Sequence

import torch

from .adapters import ADAPTER_MAGIC, load_adapter, save_adapter
from .backbone import CHECKPOINT_MAGIC, ToyConfig, ToyTransformer, load_backbone, save_backbone
from .evaluation import EvalMode, EvalReport, evaluate
from .graph import GraphError, load_graph, make_synthetic, save_graph, split
from .instructions import PromptMode, Task, gen_dataset, read_dataset, write_dataset
from .trainer import TuneConfig, grad_check, probe_example, train_stage1, train_stage2

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("graphalign")


class CliError(Exception):
    pass


# --- configuration ------------------------------------------------------------

def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise CliError(f"invalid config {path}: {e}") from None


def setting(args: argparse.Namespace, conf: dict, key: str, default: Any = None) -> Any:
    value = getattr(args, key, None)
    if value is not None:
        return value
    return conf.get(key, default)


def required(args: argparse.Namespace, conf: dict, key: str) -> Any:
    value = setting(args, conf, key)
    if value is None:
        raise CliError(f"missing required field '{key}' (pass --{key.replace('_', '-')} or set {key} in the config)")
    return value


def tune_config(args: argparse.Namespace, conf: dict) -> TuneConfig:
    values = dict(conf.get("tune", {}))
    for key in ("seed", "prompt_mode", "task", "epochs", "learning_rate"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if "seed" not in values and "seed" in conf:
        values["seed"] = conf["seed"]
    try:
        return TuneConfig.from_mapping(values)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid [tune] config: {e}") from None


def make_backbone(args: argparse.Namespace, conf: dict) -> ToyTransformer:
    path = setting(args, conf, "backbone")
    if path:
        return load_backbone(path)
    toy = dict(conf.get("toy", {}))
    seed = int(toy.pop("seed", 0))
    known = {f.name for f in fields(ToyConfig)}
    if set(toy) - known:
        raise CliError(f"unknown [toy] keys: {sorted(set(toy) - known)}")
    return ToyTransformer(ToyConfig(**toy), seed=seed)


def _write_json(obj: Any, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


# --- subcommands --------------------------------------------------------------

def cmd_make_synthetic(args: argparse.Namespace, conf: dict) -> None:
    syn = dict(conf.get("synthetic", {}))
    for key in ("n_nodes", "n_classes", "homophily"):
        v = getattr(args, key)
        if v is not None:
            syn[key] = v
    syn.setdefault("n_nodes", 300)
    syn.setdefault("n_classes", 3)
    syn.setdefault("homophily", 0.9)
    # --seed beats [synthetic].seed, which beats the top-level seed
    if args.seed is not None:
        syn["seed"] = args.seed
    syn["seed"] = int(syn.get("seed", conf.get("seed", 0)))
    out = required(args, conf, "out")
    try:
        g = make_synthetic(**syn)
    except TypeError as e:
        raise CliError(f"invalid [synthetic] config: {e}") from None
    save_graph(g, out)
    print(f"nodes={g.n_nodes} edges={len(g.edges)} classes={len(g.categories)} out={out}")


def cmd_gen_instructions(args: argparse.Namespace, conf: dict) -> None:
    cfg = tune_config(args, conf)
    graph = load_graph(required(args, conf, "graph"))
    out = required(args, conf, "out")
    which = setting(args, conf, "split", "all" if cfg.task is Task.TEXT_MATCH else "train")
    if which == "all":
        nodes = list(range(graph.n_nodes))
    else:
        sp = split(graph, cfg.ratios, cfg.seed)
        nodes = sorted(getattr(sp, which))
    mode = cfg.prompt_mode if cfg.task is not Task.TEXT_MATCH else PromptMode.NONE
    examples = gen_dataset(graph, cfg.task, nodes, cfg.gen, mode, seed=cfg.seed)
    write_dataset(examples, out)
    print(f"examples={len(examples)} task={cfg.task.value} split={which} out={out}")


def cmd_tune(args: argparse.Namespace, conf: dict) -> None:
    stage = int(setting(args, conf, "stage", 0) or 0)
    if stage not in (1, 2):
        raise CliError("missing required field 'stage' (pass --stage 1 or --stage 2)")
    graph = load_graph(required(args, conf, "graph"))
    out = required(args, conf, "out")
    cfg = tune_config(args, conf)
    if stage == 1:
        cfg = replace(cfg, task=Task.TEXT_MATCH)
    backbone = make_backbone(args, conf)
    data = setting(args, conf, "data")
    examples = read_dataset(data) if data else None
    if stage == 1:
        state, report = train_stage1(graph, backbone, cfg, examples=examples)
    else:
        init = setting(args, conf, "init")
        state_in = load_adapter(init) if init else None
        state, report = train_stage2(graph, backbone, state_in, cfg, examples=examples)
    save_adapter(state, out)
    loss_log = setting(args, conf, "log")
    if loss_log:
        report.write_csv(loss_log)
    first = report.epoch_means[0] if report.epoch_means else float("nan")
    last = report.epoch_means[-1] if report.epoch_means else float("nan")
    print(f"stage={stage} steps={len(report.losses)} first_epoch_loss={first:.6f} "
          f"last_epoch_loss={last:.6f} checksum={report.state_checksum} out={out}")


def cmd_eval(args: argparse.Namespace, conf: dict) -> None:
    graphs = args.graph or ([conf["graph"]] if "graph" in conf else None)
    if not graphs:
        raise CliError("missing required field 'graph' (pass --graph or set graph in the config)")
    if isinstance(graphs, str):
        graphs = [graphs]
    state = load_adapter(required(args, conf, "adapter"))
    cfg = tune_config(args, conf)
    mode = EvalMode(setting(args, conf, "mode", "supervised"))
    if mode is EvalMode.MULTI_DATASET and len(graphs) < 2:
        raise CliError("multi_dataset evaluation needs at least two --graph arguments")
    if mode is not EvalMode.MULTI_DATASET and len(graphs) > 1:
        raise CliError(f"{mode.value} evaluation takes exactly one --graph")
    backbone = make_backbone(args, conf)
    which = setting(args, conf, "split", "test")
    per = {}
    for path in graphs:
        g = load_graph(path)
        sp = split(g, cfg.ratios, cfg.seed)
        nodes = list(range(g.n_nodes)) if which == "all" else sorted(getattr(sp, which))
        if cfg.task is Task.LINK_PRED:
            nodes = sorted(g.labeled_nodes()) if which == "all" else nodes
        r = evaluate(g, backbone, state, nodes, cfg.task, cfg.prompt_mode, mode, cfg.gen, cfg.seed)
        per[g.name if g.name not in per else path] = r
    if len(per) == 1:
        report = next(iter(per.values()))
    else:
        from .pipeline import combine_reports

        report = combine_reports(per)
    out = setting(args, conf, "out")
    if out:
        report.write(out)
    print(report.to_json())


def cmd_grad_check(args: argparse.Namespace, conf: dict) -> None:
    graph = load_graph(required(args, conf, "graph"))
    cfg = tune_config(args, conf)
    backbone = make_backbone(args, conf)
    from .adapters import AdapterState

    n_seeds = args.seeds
    worst: dict[str, float] = {}
    for seed in range(cfg.seed, cfg.seed + n_seeds):
        state = AdapterState.init(graph.feature_dim, backbone.d_model, len(graph.categories), cfg.k, seed=seed)
        v = seed % graph.n_nodes
        errs = grad_check(probe_example(graph, v, k=cfg.k, seed=seed), graph, backbone, state, step=args.step, seed=seed)
        for k, e in errs.items():
            worst[k] = max(worst.get(k, 0.0), e)
    for k in sorted(worst):
        print(f"{k}={worst[k]:.3e}")
    status = "pass" if worst["max"] < args.tol else "fail"
    print(f"seeds={n_seeds} tol={args.tol:g} status={status}")
    if status == "fail":
        raise CliError(f"gradient check failed: max relative error {worst['max']:.3e} >= {args.tol:g}")


def cmd_inspect(args: argparse.Namespace, conf: dict) -> None:
    path = Path(args.path)
    if not path.exists():
        raise CliError(f"no such file: {path}")
    head = path.read_bytes()[:4]
    info: dict[str, Any] = {"path": str(path)}
    if head == CHECKPOINT_MAGIC:
        m = load_backbone(path)
        c = m.config
        info.update(kind="backbone", d_model=c.d_model, layers=c.layers, heads=c.heads, vocab=c.vocab_size,
                    context=c.context_length, d_ff=c.d_ff, checksum=m.checksum(),
                    parameters=[[n, list(p.shape)] for n, p in m.ordered_parameters()])
    elif head == ADAPTER_MAGIC:
        s = load_adapter(path)
        info.update(kind="adapter", feature_dim=s.feature_dim, d_model=s.d_model, n_categories=s.n_categories,
                    k=s.k, d_hidden=s.d_hidden, checksum=s.checksum())
    else:
        first = path.read_text(encoding="utf-8").split("\n", 1)[0]
        if '"segments"' in first:
            exs = read_dataset(path)
            tasks: dict[str, int] = {}
            for ex in exs:
                tasks[ex.task.value] = tasks.get(ex.task.value, 0) + 1
            info.update(kind="instructions", examples=len(exs), tasks=tasks)
        else:
            g = load_graph(path)
            info.update(kind="graph", name=g.name, nodes=g.n_nodes, edges=len(g.edges), feature_dim=g.feature_dim,
                        categories=[c.name for c in g.categories], labeled=len(g.labeled_nodes()))
    _write_json(info, setting(args, conf, "out"))


def cmd_save_backbone(args: argparse.Namespace, conf: dict) -> None:
    out = required(args, conf, "out")
    m = make_backbone(args, conf)
    save_backbone(m, out)
    print(f"checksum={m.checksum()} out={out}")


def cmd_report(args: argparse.Namespace, conf: dict) -> None:
    from .report import plot_confusion, plot_losses, write_summary

    out = Path(required(args, conf, "out"))
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.log:
        written.append(plot_losses(args.log, out / "loss.png"))
    reports = {}
    for path in args.eval or []:
        r = EvalReport.read(path)
        name = Path(path).stem
        reports[name] = r
        written.append(plot_confusion(r, out / f"confusion_{name}.png"))
    if reports:
        written.append(write_summary(reports, out / "summary.csv"))
        print((out / "summary.csv").read_text(encoding="utf-8"), end="")
    if not written:
        raise CliError("nothing to report: pass --log and/or --eval")
    for p in written:
        print(f"wrote {p}", file=sys.stderr)


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    def tuning(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--graph")
        sp.add_argument("--backbone")
        sp.add_argument("--prompt-mode", dest="prompt_mode", choices=[m.value for m in PromptMode])
        sp.add_argument("--task", choices=[t.value for t in Task])

    sp = common(sub.add_parser("make-synthetic", help="write a planted-partition text graph"))
    sp.add_argument("--nodes", dest="n_nodes", type=int)
    sp.add_argument("--classes", dest="n_classes", type=int)
    sp.add_argument("--homophily", type=float)
    sp.set_defaults(func=cmd_make_synthetic)

    sp = common(sub.add_parser("gen-instructions", help="write an instruction dataset as JSONL"))
    tuning(sp)
    sp.add_argument("--split", choices=["train", "val", "test", "all"])
    sp.set_defaults(func=cmd_gen_instructions)

    sp = common(sub.add_parser("tune", help="tune adapters (stage 1 text matching, stage 2 task)"))
    tuning(sp)
    sp.add_argument("--stage", type=int, choices=[1, 2])
    sp.add_argument("--data", help="instruction JSONL; generated from the graph when absent")
    sp.add_argument("--init", help="adapter checkpoint to warm-start stage 2")
    sp.add_argument("--log", help="CSV file for per-step loss and learning rate")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float)
    sp.set_defaults(func=cmd_tune)

    sp = common(sub.add_parser("eval", help="decode, parse and score an adapter"))
    sp.add_argument("--graph", action="append", help="repeat for multi_dataset")
    sp.add_argument("--backbone")
    sp.add_argument("--adapter")
    sp.add_argument("--mode", choices=[m.value for m in EvalMode])
    sp.add_argument("--prompt-mode", dest="prompt_mode", choices=[m.value for m in PromptMode])
    sp.add_argument("--task", choices=[t.value for t in Task if t is not Task.TEXT_MATCH])
    sp.add_argument("--split", choices=["train", "val", "test", "all"])
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("grad-check", help="compare autograd with central differences"))
    tuning(sp)
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_grad_check)

    sp = common(sub.add_parser("inspect", help="summarize a graph, dataset or checkpoint"))
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect)

    sp = common(sub.add_parser("save-backbone", help="write the configured toy backbone to a checkpoint"))
    sp.add_argument("--backbone")
    sp.set_defaults(func=cmd_save_backbone)

    sp = common(sub.add_parser("report", help="render loss curves and confusion matrices"))
    sp.add_argument("--log", action="append", help="loss CSV from tune; repeatable")
    sp.add_argument("--eval", action="append", help="EvalReport JSON; repeatable")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        conf = load_config(args.config)
        args.func(args, conf)
    except (CliError, GraphError, ValueError, OSError) as e:
        print(f"graphalign {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
