"""Command-line entry point: pretrain, finetune, ablate, evaluate, params.

Any option can also come from a flat ``key = value`` file given with
``--config``; flags on the command line win over the file.
"""

import argparse
import logging
import os
import sys

from . import runner, segnet
from .peft import FULL_SCALE_REFERENCE, PeftStrategy, apply_strategy, peft_param_ratio


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use ``_`` or ``-``."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _add_run_options(p):
    p.add_argument("--ckpt", required=True, help="checkpoint directory from 'pretrain'")
    p.add_argument("--scenario", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=runner.RunConfig.lr)
    p.add_argument("--weight-decay", type=float, default=runner.RunConfig.weight_decay)
    p.add_argument("--lam", type=float, default=None, help="focal weight (forced to 0 on medical)")
    p.add_argument("--train-size", type=int, default=runner.RunConfig.train_size)
    p.add_argument("--eval-size", type=int, default=runner.RunConfig.eval_size)


def build_parser():
    ap = argparse.ArgumentParser(prog="parspace")
    ap.add_argument("--config", help="flat key = value defaults file")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a fresh model on the base scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-size", type=int, default=200)
    p.add_argument("--min-dsc", type=float, default=0.85)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint under one strategy")
    _add_run_options(p)
    p.add_argument("--strategy", required=True, help="full|decoder|lora:R|adapter:B|parser:MODE:SELECTION")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--report-json", help="also write the full run report (includes wall-clock)")
    p.add_argument("--save", help="write the fine-tuned checkpoint here")

    p = sub.add_parser("ablate", help="run one ablation axis and write a table")
    _add_run_options(p)
    p.add_argument("--axis", required=True, choices=sorted(runner.ABLATION_AXES))
    p.add_argument("--out", required=True, help="markdown path; a .csv is written alongside")

    p = sub.add_parser("evaluate", help="held-out metrics of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-size", type=int, default=runner.RunConfig.eval_size)
    p.add_argument("--out", help="optional CSV path")

    p = sub.add_parser("params", help="print a strategy's partition and counts")
    p.add_argument("--strategy", required=True)
    p.add_argument("--ckpt", help="checkpoint to inspect (default: fresh toy model)")
    p.add_argument("--list", action="store_true", help="list every parameter")
    return ap


def _write(path, text):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _run_config(args, strategy):
    return runner.RunConfig(strategy=strategy, scenario=args.scenario, lam=args.lam, lr=args.lr,
                            weight_decay=args.weight_decay, steps=args.steps, seed=args.seed,
                            train_size=args.train_size, eval_size=args.eval_size)


def cmd_pretrain(args):
    try:
        res = runner.pretrain(seed=args.seed, steps=args.steps, lr=args.lr,
                              eval_size=args.eval_size, min_dsc=args.min_dsc)
    except runner.PretrainingQualityError as err:
        curve = os.path.join(args.out, "failed_curve.txt")
        _write(curve, "\n".join(f"{i} {v:.8f}" for i, v in enumerate(err.curve)) + "\n")
        print(f"error: {err}; loss curve written to {curve}", file=sys.stderr)
        return 2
    segnet.save_checkpoint(res.model, args.out)
    _write(os.path.join(args.out, "pretrain_curve.txt"),
           "\n".join(f"{i} {v:.8f}" for i, v in enumerate(res.curve)) + "\n")
    print(f"pretrained seed {args.seed}: held-out base DSC {res.dsc:.4f} -> {args.out}")
    return 0


def cmd_finetune(args):
    base = segnet.load_checkpoint(args.ckpt)
    report = runner.finetune(base, _run_config(args, args.strategy))
    _write(args.out, runner.csv_text([report]))
    if args.report_json:
        _write(args.report_json, report.to_json() + "\n")
    if args.save:
        segnet.save_checkpoint(report.model, args.save)
    print(f"{report.run_id}: DSC {report.initial.dsc:.4f} -> {report.final.dsc:.4f}, "
          f"trainable {report.counts['total']} ({report.steps_per_sec:.1f} steps/s)")
    return 0


def cmd_ablate(args):
    base = segnet.load_checkpoint(args.ckpt)
    reports = [runner.finetune(base, _run_config(args, s)) for s in runner.ABLATION_AXES[args.axis]]
    _write(args.out, runner.markdown_table(reports, args.axis))
    _write(os.path.splitext(args.out)[0] + ".csv", runner.csv_text(reports))
    for r in reports:
        print(f"{r.strategy}: DSC {r.final.dsc:.4f}, encoder trainable {r.counts['encoder']}")
    return 0


def cmd_evaluate(args):
    model = segnet.load_checkpoint(args.ckpt)
    m = runner.evaluate(model, runner.heldout(args.scenario, args.eval_size, args.seed))
    print(f"{args.scenario}: dsc {m.dsc:.6f} miou {m.miou:.6f} f1 {m.f1:.6f} (n={args.eval_size})")
    if args.out:
        row = (f"evaluate@{args.scenario}#s{args.seed},{model.strategy or 'none'},{args.scenario},"
               f"{m.dsc:.6f},{m.miou:.6f},{m.f1:.6f},"
               f"{sum(t.size for _, _, t in model.named_parameters() if t.requires_grad)},0,{args.seed}")
        _write(args.out, ",".join(runner.CSV_COLUMNS) + "\n" + row + "\n")
    return 0


def cmd_params(args):
    base = segnet.load_checkpoint(args.ckpt) if args.ckpt else segnet.ToySamModel()
    strategy = PeftStrategy.parse(args.strategy)
    probe = base.clone(strip_strategy=True)
    part = apply_strategy(probe, strategy)
    print(f"strategy {strategy}")
    if args.list:
        for name, kind, t in probe.named_parameters():
            print(f"  {name:32s} {kind:12s} {t.size:7d} {'trainable' if t.requires_grad else 'frozen'}")
    c = part.counts()
    print(f"encoder {c['encoder']}  decoder {c['decoder']}  total {c['total']}  frozen "
          f"{sum(t.size for t in part.frozen.values())}")
    if strategy.kind == "parser":
        ratio = peft_param_ratio(strategy, PeftStrategy("lora", rank=4), base)
        print(f"lora:4 / {strategy} encoder ratio = {float(ratio):.2f}")
        print(f"reference (full SAM scale): {FULL_SCALE_REFERENCE['coefficients_conv_only']} coefficients, "
              f"{FULL_SCALE_REFERENCE['reduction_vs_peft']} fewer than LoRA")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "ablate": cmd_ablate,
            "evaluate": cmd_evaluate, "params": cmd_params}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    early, rest = pre.parse_known_args(argv)
    command = next((tok for tok in rest if tok in COMMANDS), None)
    if early.config and command:
        values = read_config(early.config)
        subparser = ap._subparsers._group_actions[0].choices[command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            ap.error(f"unknown config keys for {command}: {', '.join(unknown)}")
        # string defaults go through each option's type converter
        subparser.set_defaults(**values)
        for a in subparser._actions:
            if a.dest in values:
                a.required = False
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
