"""Command-line entry point wiring every stage of the pipeline.

Each run prints its fully resolved configuration before doing anything, so a
log line is enough to reproduce the run.  Usage errors exit 2 (argparse),
runtime failures print one ``error:`` line and exit 1.
"""

import argparse
import os
import sys
from dataclasses import asdict

from .bank import MemoryBank
from .config import ConfigError, TrainConfig, format_config, load_config
from .corpus import gen_irrelevant, gen_pretrain, gen_synthetic, load_corpus, save_corpus
from .evaluation import (
    eval_qa,
    eval_qa_baseline,
    retention_curve,
    robustness_sweep,
    write_qa_csv,
    write_rows_csv,
)
from .pipeline import (
    answer,
    build_model,
    learning_phase,
    load_model,
    online_adapt,
    pretrain_base,
    save_model,
)


def _out_path(args, name):
    out_dir = getattr(args, "out_dir", None) or "."
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _tcfg_overrides(args):
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "alpha", None) is not None:
        over["alpha"] = args.alpha
    return over


def _fresh_configs(args):
    over = _tcfg_overrides(args)
    if getattr(args, "window", None) is not None:
        over["window"] = args.window
    if args.config:
        mcfg, tcfg = load_config(args.config, over)
    else:
        from .config import ModelConfig

        mcfg = ModelConfig()
        tcfg = TrainConfig(**{**asdict(TrainConfig()), **over})
    print("resolved config:")
    print(format_config(mcfg, tcfg))
    return mcfg, tcfg


def _checkpoint_configs(args, allow_window_in_tcfg=False):
    model, tcfg0, meta = load_model(args.checkpoint)
    over = _tcfg_overrides(args)
    if allow_window_in_tcfg and getattr(args, "window", None) is not None:
        over["window"] = args.window
    if args.config:
        mcfg, tcfg = load_config(args.config, over)
        if asdict(mcfg) != asdict(model.cfg):
            raise ConfigError("config file architecture differs from the checkpoint")
    else:
        tcfg = TrainConfig(**{**asdict(tcfg0), **over})
    print("resolved config:")
    print(format_config(model.cfg, tcfg))
    return model, tcfg


def _runtime_window(args, tcfg):
    w = args.window if getattr(args, "window", None) is not None else tcfg.window
    print(f"window={w if w else 'all'}")
    return w or None


def cmd_gen_data(args):
    for name, records in (
        ("train.jsonl", gen_synthetic(args.seed or 0, args.docs, args.facts, "train")),
        ("valid.jsonl", gen_synthetic(args.seed or 0, args.valid_docs, args.facts, "valid")),
        ("test.jsonl", gen_synthetic(args.seed or 0, args.test_docs, args.facts, "test")),
        ("pretrain.jsonl", gen_pretrain(args.seed or 0, args.pretrain_docs, args.facts)),
    ):
        path = _out_path(args, name)
        save_corpus(records, path)
        print(f"wrote {len(records)} records to {path}")
    return 0


def cmd_pretrain_base(args):
    mcfg, tcfg = _fresh_configs(args)
    model = build_model(mcfg, tcfg.seed)
    records = load_corpus(args.train)
    log = pretrain_base(model, records, tcfg)
    for step, loss in log:
        print(f"pretrain step {step}: nll {loss:.4f}")
    path = _out_path(args, "base.cmtw")
    save_model(path, model, tcfg)
    print(f"wrote frozen base checkpoint to {path}")
    return 0


def cmd_train(args):
    model, tcfg = _checkpoint_configs(args, allow_window_in_tcfg=True)
    train_records = load_corpus(args.train)
    valid_records = load_corpus(args.valid)
    log = learning_phase(model, train_records, valid_records, tcfg)
    write_rows_csv(log["train"], _out_path(args, "train_log.csv"),
                   ["step", "nll", "self_match", "uniformity", "total", "lr"])
    write_rows_csv(log["valid"], _out_path(args, "valid_log.csv"), ["step", "em", "f1"])
    path = _out_path(args, "trained.cmtw")
    save_model(path, model, tcfg, meta={"best_step": log["best_step"], "best_f1": log["best_f1"]})
    print(f"best validation: step {log['best_step']} em {log['best_em']:.4f} f1 {log['best_f1']:.4f}")
    print(f"wrote trained checkpoint to {path}")
    return 0


def cmd_adapt(args):
    model, tcfg = _checkpoint_configs(args)
    stream = load_corpus(args.stream)
    bank = online_adapt(model, stream)
    bank.save(args.bank)
    truncated = sum(1 for e in bank if e.truncated)
    print(f"wrote bank with {len(bank)} memories to {args.bank}"
          + (f" ({truncated} truncated)" if truncated else ""))
    return 0


def cmd_answer(args):
    model, tcfg = _checkpoint_configs(args)
    window = _runtime_window(args, tcfg)
    bank = MemoryBank.load(args.bank)
    text = answer(model, bank, args.question, window=window,
                  memory_aware=tcfg.memory_aware_inference, alpha=tcfg.alpha,
                  demote_ids=tcfg.demote_set())
    print(text)
    return 0


def cmd_eval(args):
    model, tcfg = _checkpoint_configs(args)
    window = _runtime_window(args, tcfg)
    qa = load_corpus(args.qa)
    if args.baseline:
        report = eval_qa_baseline(model, qa)
    else:
        bank = MemoryBank.load(args.bank)
        report = eval_qa(model, bank, qa, window=window,
                         memory_aware=tcfg.memory_aware_inference, alpha=tcfg.alpha,
                         demote_ids=tcfg.demote_set())
    path = _out_path(args, "qa_report.csv")
    write_qa_csv(report, path)
    print(f"n {report.n} em {report.em:.4f} f1 {report.f1:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_retention(args):
    model, tcfg = _checkpoint_configs(args)
    window = _runtime_window(args, tcfg)
    stream = load_corpus(args.stream)
    positions = [int(x) for x in args.positions.split(",")]
    rows = retention_curve(model, stream, args.probe, positions, window=window)
    path = _out_path(args, "retention.csv")
    write_rows_csv(rows, path, ["position", "f1", "retention_ratio"])
    for row in rows:
        print(f"position {row['position']}: f1 {row['f1']:.4f} retention {row['retention_ratio']:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_robustness(args):
    model, tcfg = _checkpoint_configs(args)
    window = _runtime_window(args, tcfg)
    qa = load_corpus(args.qa)
    ratios = [float(x) for x in args.ratio_list.split(",")]
    rows = robustness_sweep(model, qa, ratios, window=window, seed=tcfg.seed)
    path = _out_path(args, "robustness.csv")
    write_rows_csv(rows, path, ["ratio", "relative_f1", "f1"])
    for row in rows:
        print(f"ratio {row['ratio']}: relative f1 {row['relative_f1']:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_inspect_bank(args):
    bank = MemoryBank.load(args.bank)
    ids = bank.doc_ids()
    head = ", ".join(str(i) for i in ids[:8]) + (" ..." if len(ids) > 8 else "")
    print(f"k={bank.k} d={bank.d} count={len(bank)}")
    print(f"doc_ids: {head}" if ids else "doc_ids: (empty)")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="cmt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True, out_dir=True):
        if config:
            sp.add_argument("--config", default=None, help="flat key=value config file")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        if out_dir:
            sp.add_argument("--out-dir", default=None)

    sp = sub.add_parser("gen-data", help="write synthetic corpora")
    common(sp, config=False)
    sp.add_argument("--docs", type=int, default=256)
    sp.add_argument("--valid-docs", type=int, default=64)
    sp.add_argument("--test-docs", type=int, default=64)
    sp.add_argument("--pretrain-docs", type=int, default=320)
    sp.add_argument("--facts", type=int, default=1)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain-base", help="pretrain and freeze the base model")
    common(sp)
    sp.add_argument("--train", required=True, help="pretraining corpus jsonl")
    sp.set_defaults(func=cmd_pretrain_base)

    sp = sub.add_parser("train", help="run the learning phase")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="frozen base checkpoint")
    sp.add_argument("--train", required=True)
    sp.add_argument("--valid", required=True)
    sp.add_argument("--window", type=int, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("adapt", help="compress a document stream into a bank")
    common(sp, out_dir=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--bank", required=True, help="output bank path")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("answer", help="answer one question from a bank")
    common(sp, out_dir=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bank", required=True)
    sp.add_argument("--window", type=int, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("question")
    sp.set_defaults(func=cmd_answer)

    sp = sub.add_parser("eval", help="score a QA set against a bank")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bank", default=None)
    sp.add_argument("--qa", required=True)
    sp.add_argument("--window", type=int, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--baseline", action="store_true", help="no-memory control")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("retention", help="knowledge retention curve")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--positions", default="32,64,128,256")
    sp.add_argument("--probe", type=int, default=32)
    sp.add_argument("--window", type=int, default=None)
    sp.set_defaults(func=cmd_retention)

    sp = sub.add_parser("robustness", help="distractor robustness sweep")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--qa", required=True)
    sp.add_argument("--ratio-list", default="0,0.2,0.4,0.6,0.8")
    sp.add_argument("--window", type=int, default=None)
    sp.set_defaults(func=cmd_robustness)

    sp = sub.add_parser("inspect-bank", help="print bank metadata")
    sp.add_argument("--bank", required=True)
    sp.set_defaults(func=cmd_inspect_bank)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # one machine-parsable line, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
