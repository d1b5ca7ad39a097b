"""Command-line entry point: ``treeformer <command> [flags]``.

Failures print one line ``error[<kind>]: <message>`` on stderr and exit
non-zero.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from treeformer import autodiff as ad
from treeformer.config import format_config, load_run_config
from treeformer.data import DatasetConfig, generate, to_ids, write_dataset
from treeformer.errors import ConfigError, ContractError, TreeformerError
from treeformer.gradients import run_gradcheck
from treeformer.profiler import profile_run, rows_to_csv
from treeformer.sweep import curve_shape, run_sweep, sweep_csv
from treeformer.train import evaluate, load_examples, load_model, train, vocab_for

def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _run_overrides(args) -> dict:
    return {
        "seed": args.seed, "H": args.height, "L": args.depth, "beam": getattr(args, "beam", None),
        "length_penalty": getattr(args, "length_penalty", None), "train": getattr(args, "train", None),
        "valid": getattr(args, "valid", None), "task": getattr(args, "task", None),
        "max_steps": getattr(args, "steps", None),
    }


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    config = DatasetConfig(task=args.task, min_length=args.min_length, max_length=args.max_length,
                           vocab_size=args.vocab, count=args.count, seed=args.seed if args.seed is not None else 0)
    out = Path(args.out)
    write_dataset(out, generate(config), config, force=args.force)
    print(f"wrote {config.count} {config.task} examples to {out}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config, _run_overrides(args))
    out = Path(args.out or run.out)
    run.out = str(out)
    run.validate()
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(exist_ok=True)
    data_config, train_ex = load_examples(run.train, run.task)
    _, valid_ex = load_examples(run.valid, run.task)
    (out / "config.txt").write_text(format_config(run), encoding="utf-8")
    result = train(run, train_ex, valid_ex, vocab_for(run.task, data_config.vocab_size),
                   out / "model.ckpt", out / "metrics.log",
                   on_eval=lambda rec: print(rec.line(), flush=True))
    print(f"best_step={result.best_step}\tval_metric={result.best_metric:.6f}\t"
          f"train_metric={result.train_metric:.6f}\tcheckpoint={out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    model, run, _ = load_model(args.checkpoint)
    _, examples = load_examples(args.data, run.task, model.config.vocab_size)
    metric = evaluate(model, examples, beam=args.beam, length_penalty=args.length_penalty or 0.0)
    name = "accuracy" if run.task == "dyck2" else "exact_match"
    print(f"{name}={metric:.6f}\texamples={len(examples)}")
    return 0


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.precision == 64 else np.float32
    tolerance = args.tolerance if args.tolerance is not None else (1e-6 if args.precision == 64 else 1e-3)
    report = run_gradcheck(d=args.d, n=args.n, H=args.height if args.height is not None else 3,
                           L=args.depth if args.depth is not None else 1, dtype=dtype, tolerance=tolerance,
                           seed=args.seed or 0, heads=("classify", "seq2seq") if args.head == "both" else (args.head,))
    for line in report.lines():
        print(line)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}\tmax_relative_error={report.max_error:.3e}\ttolerance={tolerance:.0e}")
    return 0 if report.passed else 1


def cmd_profile(args) -> int:
    ns = _ints(args.n)
    hs = _ints(args.heights) if args.heights else ([args.height] if args.height is not None else [])
    points = [(n, n if not hs else H) for n in ns for H in (hs or [n])]
    rows = profile_run(points, d=args.d, repeats=args.repeats, seed=args.seed or 0)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def _tokenize(sentence: str, task: str) -> list[int]:
    if task == "dyck2" and not any(ch.isdigit() for ch in sentence):
        return to_ids(sentence)
    try:
        return [int(t) for t in sentence.split()]
    except ValueError:
        raise ContractError(f"cannot tokenize {sentence!r}; give space-separated ids") from None


def inspect_lines(model, ids: list[int]) -> list[str]:
    with ad.no_grad():
        chart = model.encode_sequential(ids, keep_weights=True)
    lines = [f"# chart n={chart.n} H={chart.H} d={chart.d}", chart.render()]
    for h in range(2, chart.H + 1):
        for span in chart.cells_of_length(h):
            w = chart.weights[span]
            top = int(np.argmax(w))
            lines.append(f"cell={span.i},{span.j}\ttop_split={span.i + top}\tweights="
                         + " ".join(f"{x:.6f}" for x in w))
            for k, x in enumerate(w):
                lines.append(f"span={span.i},{span.j}\tk={span.i + k}\tweight={x:.9f}")
    return lines


def cmd_inspect(args) -> int:
    model, run, _ = load_model(args.checkpoint)
    ids = _tokenize(args.sentence, run.task)
    if not ids:
        raise ContractError("empty input")
    if len(ids) > run.max_length:
        raise ContractError(f"input of {len(ids)} tokens exceeds the configured maximum {run.max_length}")
    if max(ids) >= model.config.vocab_size or min(ids) < 0:
        raise ContractError(f"token id outside the checkpoint vocabulary ({model.config.vocab_size})")
    print("\n".join(inspect_lines(model, ids)))
    return 0


def cmd_sweep(args) -> int:
    values = _ints(args.values)
    if not values:
        raise ConfigError("--values is empty")
    run = load_run_config(args.config, _run_overrides(args))
    out = Path(args.out or run.out)
    run.out = str(out)
    run.validate()
    data_config, train_ex = load_examples(run.train, run.task)
    _, valid_ex = load_examples(run.valid, run.task)
    rows = run_sweep(args.axis, values, run, train_ex, valid_ex, vocab_for(run.task, data_config.vocab_size), out)
    text = sweep_csv(rows)
    (out / "sweep.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"# shape={curve_shape([r.metric for r in rows])}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treeformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat 'key = value' run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--height", type=int, help="maximum phrase length H")
        p.add_argument("--depth", type=int, help="pre-encoder layers L")
        p.add_argument("--out")
        p.add_argument("--force", action="store_true")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, config=False)
    p.add_argument("--task", default="dyck2", choices=["dyck2", "copy", "reverse"])
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--min-length", type=int, default=2)
    p.add_argument("--max-length", type=int, default=24)
    p.add_argument("--vocab", type=int, default=7)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--task", choices=["dyck2", "copy", "reverse"])
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--length-penalty", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    common(p)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--precision", type=int, choices=[32, 64], default=64)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--head", choices=["classify", "seq2seq", "both"], default="both")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("profile", help="instrumented cost sweep, CSV on stdout")
    common(p)
    p.add_argument("--n", default="4,8,16,32")
    p.add_argument("--heights", help="comma list of H values (default: --height, else H = n)")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("inspect", help="dump the chart and split weights for one input")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sentence", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", help="train one model per height or depth value")
    common(p)
    p.add_argument("--axis", choices=["height", "depth"], required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--task", choices=["dyck2", "copy", "reverse"])
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TreeformerError as exc:
        kind, message = exc.kind, str(exc)
    except FileNotFoundError as exc:
        kind, message = "path", str(exc)
    except FileExistsError as exc:
        kind, message = "exists", str(exc)
    except (IndexError, ValueError) as exc:
        kind, message = "value", str(exc)
    message = " ".join(message.split())
    print(f"error[{kind}]: {message}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
