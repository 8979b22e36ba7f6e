"""Command line interface.

Each run resolves its options as: explicit flag, then value from a
--config file (flat key=value lines), then the built-in default. The
effective options are snapshotted to {out}.config so any run can be
replayed bit-exactly with `--config {out}.config` plus the same inputs.
Errors print one `error: <message>` line to stderr; exit codes are 0 on
success, 1 on runtime failure, 2 on usage problems.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

from . import baselines, data, elastic, harness, zoo

USAGE = """usage: ead <subcommand> [options]

subcommands:
  train       fit a model on a dataset and save it
  distill     train a teacher at temperature T, then a distilled student
  attack      run the elastic-net attack (or its change-of-variable form)
  baseline    run a grid-searched FGM or I-FGM baseline
  sweep-beta  attack across a list of beta values, both decision rules
  transfer    craft on one model across kappas, score on another
  advtrain    retrain on crafted examples and re-attack every regime
  report      merge/convert report files (csv or json)

common options: --config FILE, --seed N, --out PATH; run
`ead <subcommand> --help` for the full list."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so dispatch owns the codes."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# option plumbing


def parse_scalar(text: str):
    """int if possible, then float, else the raw string."""
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def read_config(path) -> dict:
    """Flat key=value lines; blank lines and # comments are skipped."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = parse_scalar(value.strip())
    return out


def _format_value(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(path, options: dict) -> None:
    """Snapshot the effective options, sorted, atomically."""
    lines = "".join(
        f"{key}={_format_value(value)}\n"
        for key, value in sorted(options.items())
        if value is not None
    )
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(lines)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def resolve_options(args: argparse.Namespace, defaults: dict) -> dict:
    """flag > config file > default, for every key the subcommand declares."""
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    options = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            options[key] = flag
        elif key in file_values:
            options[key] = file_values[key]
        else:
            options[key] = default
    return options


def _require_file(path, what):
    if path is None:
        raise ValueError(f"missing required option: {what}")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _require_out(options):
    out = options.get("out")
    if out is None:
        raise ValueError("missing required option: --out")
    parent = os.path.dirname(os.path.abspath(out))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"output directory does not exist: {parent}")
    return out


def _parse_list(text, what):
    try:
        values = [float(v) for v in str(text).split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ValueError(f"bad {what} list: {text!r}") from exc
    if not values:
        raise ValueError(f"empty {what} list")
    return values


# ---------------------------------------------------------------------------
# shared loaders


def _load_dataset(options, split):
    if options.get("images"):
        images = _require_file(options["images"], "--images")
        labels = _require_file(options.get("labels"), "--labels")
        return data.load_idx(images, labels, split=split)
    name = options.get("dataset", "digits")
    if name != "digits":
        raise ValueError(f"unknown dataset: {name!r}")
    return data.load_digits_dataset(split, seed=0)


def _load_model(options, key="model"):
    return zoo.load_model(_require_file(options.get(key), f"--{key}"))


def _model_id(path):
    return os.path.splitext(os.path.basename(str(path)))[0]


def _train_config(options):
    return zoo.TrainConfig(
        epochs=int(options["epochs"]),
        batch_size=int(options["batch_size"]),
        optimizer=str(options["optimizer"]),
        lr=float(options["lr"]),
        temperature=float(options.get("temperature") or 1.0),
        seed=int(options["seed"]),
    )


def _ead_config(options, **overrides):
    base = dict(
        beta=float(options["beta"]),
        kappa=float(options["kappa"]),
        c_init=float(options["c_init"]),
        binary_search_steps=int(options["binary_steps"]),
        iterations=int(options["iterations"]),
        alpha0=float(options["alpha0"]),
        rule=str(options["rule"]),
        seed=int(options["seed"]),
    )
    base.update(overrides)
    return elastic.EadConfig(**base)


def _eval_images(net, options):
    examples = _load_dataset(options, "test").examples()
    kept = harness.correctly_classified(net, examples)
    count = int(options["num_images"])
    if count < 1:
        raise ValueError("--num-images must be >= 1")
    return kept[:count]


def _emit(options, reports):
    out = _require_out(options)
    harness.emit_report(reports, out)
    write_config(out + ".config", options)
    return out


ATTACK_DEFAULTS = dict(
    beta=1e-3, kappa=0.0, rule="en", iterations=1000, binary_steps=9,
    c_init=1e-3, alpha0=0.01,
)
TRAIN_DEFAULTS = dict(epochs=30, batch_size=32, lr=1e-3, optimizer="adam")
DATA_DEFAULTS = dict(dataset="digits", images=None, labels=None)
EVAL_DEFAULTS = dict(num_images=50, protocol="average", seed=0)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(options):
    out = _require_out(options)
    train = _load_dataset(options, "train")
    test = _load_dataset(options, "test")
    net = zoo.train(zoo.default_arch(train.num_classes), train, _train_config(options))
    zoo.save_model(net, out)
    write_config(out + ".config", options)
    print(f"saved {out}; test accuracy {zoo.evaluate(net, test):.4f}")
    return 0


def _cmd_distill(options):
    out = _require_out(options)
    train = _load_dataset(options, "train")
    test = _load_dataset(options, "test")
    temperature = float(options["temperature"])
    cfg = _train_config(options)
    teacher, student = harness.build_distilled(train, temperature, cfg)
    zoo.save_model(student, out)
    if options.get("teacher_out"):
        zoo.save_model(teacher, options["teacher_out"])
    write_config(out + ".config", options)
    print(f"saved {out}; student test accuracy {zoo.evaluate(student, test):.4f}")
    return 0


def _method_from_options(options):
    cfg = _ead_config(options)
    if options["method"] == "cov":
        return harness.CovMethod(cfg)
    if options["method"] == "fista":
        return harness.ElasticMethod(cfg)
    raise ValueError(f"unknown method: {options['method']!r}")


def _cmd_attack(options):
    net = _load_model(options)
    method = _method_from_options(options)
    stats = harness.run_protocol(
        method, net, _eval_images(net, options),
        str(options["protocol"]), int(options["seed"]),
    )
    report = harness.ExperimentReport(
        attack=method.name, model=_model_id(options["model"]),
        protocol=str(options["protocol"]), stats=stats,
        config=method.params(), seed=int(options["seed"]),
    )
    out = _emit(options, [report])
    print(f"{method.name}: asr {stats.asr:.1f}%, report {out}")
    return 0


def _cmd_baseline(options):
    net = _load_model(options)
    norm = str(options["norm"])
    default = baselines.DEFAULT_GRIDS.get(norm)
    if default is None:
        raise ValueError(f"norm must be one of l1, l2, linf, got {norm!r}")
    grid = baselines.GridSpec(
        norm,
        float(options["grid_min"] if options["grid_min"] is not None else default.eps_min),
        float(options["grid_max"] if options["grid_max"] is not None else default.eps_max),
        float(options["grid_step"] if options["grid_step"] is not None else default.eps_step),
    )
    if options["attack"] == "fgm":
        method = harness.FgmMethod(norm, grid)
    elif options["attack"] == "ifgm":
        method = harness.IfgmMethod(norm, grid, iters=int(options["iterations"]))
    else:
        raise ValueError(f"attack must be fgm or ifgm, got {options['attack']!r}")
    stats = harness.run_protocol(
        method, net, _eval_images(net, options),
        str(options["protocol"]), int(options["seed"]),
    )
    report = harness.ExperimentReport(
        attack=method.name, model=_model_id(options["model"]),
        protocol=str(options["protocol"]), stats=stats, config={},
        seed=int(options["seed"]),
    )
    out = _emit(options, [report])
    print(f"{method.name}: asr {stats.asr:.1f}%, report {out}")
    return 0


def _cmd_sweep_beta(options):
    net = _load_model(options)
    betas = _parse_list(options["values"], "beta")
    images = _eval_images(net, options)
    model_id = _model_id(options["model"])
    seed = int(options["seed"])
    reports = []
    for beta in betas:
        for rule in ("en", "l1"):
            method = harness.ElasticMethod(_ead_config(options, beta=beta, rule=rule))
            stats = harness.run_protocol(method, net, images, "average", seed)
            reports.append(harness.ExperimentReport(
                attack=method.name, model=model_id, protocol="average",
                stats=stats, config=method.params(), seed=seed,
            ))
        cov = harness.CovMethod(_ead_config(options, beta=beta, rule="en"))
        stats = harness.run_protocol(cov, net, images, "average", seed)
        reports.append(harness.ExperimentReport(
            attack=cov.name, model=model_id, protocol="average",
            stats=stats, config=cov.params(), seed=seed,
        ))
    out = _emit(options, reports)
    print(f"swept {len(betas)} beta values, report {out}")
    return 0


def _cmd_transfer(options):
    source = _load_model(options, "model")
    target = _load_model(options, "target")
    kappas = _parse_list(options["kappas"], "kappa")
    images = _eval_images(source, options)
    rows = harness.transfer_experiment(
        source, target, images, kappas, _ead_config(options), int(options["seed"]),
    )
    reports = [
        harness.ExperimentReport(
            attack=f"ead-{options['rule']}", model=_model_id(options["target"]),
            protocol="average", stats=stats,
            config={"beta": float(options["beta"]), "kappa": kappa,
                    "rule": str(options["rule"])},
            seed=int(options["seed"]),
        )
        for kappa, stats in rows
    ]
    out = _emit(options, reports)
    print(f"transfer over {len(kappas)} kappa values, report {out}")
    return 0


def _cmd_advtrain(options):
    train = _load_dataset(options, "train")
    test = _load_dataset(options, "test")
    craft = {
        "ead-l1": _ead_config(options, rule="l1"),
        "cw": _ead_config(options, beta=0.0, rule="en"),
    }
    net = zoo.train(zoo.default_arch(train.num_classes), train, _train_config(options))
    kept = harness.correctly_classified(net, test.examples())
    eval_images = kept[: int(options["num_images"])]
    result = harness.advtrain_experiment(
        train, test, _train_config(options), craft,
        int(options["sources"]), eval_images, int(options["seed"]),
        baseline=net,
    )
    reports = [
        harness.ExperimentReport(
            attack=attack, model=regime, protocol="average", stats=stats,
            config={"beta": craft[attack].beta, "kappa": craft[attack].kappa,
                    "rule": craft[attack].rule},
            seed=int(options["seed"]),
        )
        for (attack, regime), stats in result["stats"].items()
    ]
    out = _emit(options, reports)
    for regime, acc in result["accuracy"].items():
        print(f"accuracy {regime} {acc:.4f}")
    print(f"adversarial-training report {out}")
    return 0


def _cmd_report(options):
    paths = options["inputs"]
    if not paths:
        raise ValueError("missing required option: --inputs")
    reports = []
    for path in str(paths).split(","):
        reports.extend(harness.read_report(_require_file(path, "--inputs")))
    out = _require_out(options)
    harness.emit_report(reports, out)
    print(f"merged {len(reports)} rows into {out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(parser, *groups):
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    if "data" in groups:
        parser.add_argument("--dataset", default=None)
        parser.add_argument("--images", default=None)
        parser.add_argument("--labels", default=None)
    if "train" in groups:
        parser.add_argument("--epochs", type=int, default=None)
        parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        parser.add_argument("--lr", type=float, default=None)
        parser.add_argument("--optimizer", default=None)
        parser.add_argument("--temperature", type=float, default=None)
    if "attack" in groups:
        parser.add_argument("--beta", type=float, default=None)
        parser.add_argument("--kappa", type=float, default=None)
        parser.add_argument("--rule", choices=("en", "l1"), default=None)
        parser.add_argument("--iterations", type=int, default=None)
        parser.add_argument("--binary-steps", dest="binary_steps", type=int, default=None)
        parser.add_argument("--c-init", dest="c_init", type=float, default=None)
        parser.add_argument("--alpha0", type=float, default=None)
    if "eval" in groups:
        parser.add_argument("--num-images", dest="num_images", type=int, default=None)
        parser.add_argument("--protocol", choices=harness.PROTOCOLS, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="ead", add_help=True)
    sub = parser.add_subparsers(dest="subcommand")

    p = sub.add_parser("train", prog="ead train")
    _add_common(p, "data", "train")

    p = sub.add_parser("distill", prog="ead distill")
    _add_common(p, "data", "train")
    p.add_argument("--teacher-out", dest="teacher_out", default=None)

    p = sub.add_parser("attack", prog="ead attack")
    _add_common(p, "data", "attack", "eval")
    p.add_argument("--model", default=None)
    p.add_argument("--method", choices=("fista", "cov"), default=None)

    p = sub.add_parser("baseline", prog="ead baseline")
    _add_common(p, "data", "eval")
    p.add_argument("--model", default=None)
    p.add_argument("--attack", choices=("fgm", "ifgm"), default=None)
    p.add_argument("--norm", choices=("l1", "l2", "linf"), default=None)
    p.add_argument("--grid-min", dest="grid_min", type=float, default=None)
    p.add_argument("--grid-max", dest="grid_max", type=float, default=None)
    p.add_argument("--grid-step", dest="grid_step", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)

    p = sub.add_parser("sweep-beta", prog="ead sweep-beta")
    _add_common(p, "data", "attack", "eval")
    p.add_argument("--model", default=None)
    p.add_argument("--values", default=None)

    p = sub.add_parser("transfer", prog="ead transfer")
    _add_common(p, "data", "attack", "eval")
    p.add_argument("--model", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--kappas", default=None)

    p = sub.add_parser("advtrain", prog="ead advtrain")
    _add_common(p, "data", "train", "attack", "eval")
    p.add_argument("--sources", type=int, default=None)

    p = sub.add_parser("report", prog="ead report")
    _add_common(p)
    p.add_argument("--inputs", default=None)

    return parser


_COMMANDS = {
    "train": (_cmd_train, lambda: {**DATA_DEFAULTS, **TRAIN_DEFAULTS,
                                   "temperature": 1.0, "seed": 0, "out": None}),
    "distill": (_cmd_distill, lambda: {**DATA_DEFAULTS, **TRAIN_DEFAULTS,
                                       "temperature": 100.0, "teacher_out": None,
                                       "seed": 0, "out": None}),
    "attack": (_cmd_attack, lambda: {**DATA_DEFAULTS, **ATTACK_DEFAULTS,
                                     **EVAL_DEFAULTS, "model": None,
                                     "method": "fista", "out": None}),
    "baseline": (_cmd_baseline, lambda: {**DATA_DEFAULTS, **EVAL_DEFAULTS,
                                         "model": None, "attack": "ifgm",
                                         "norm": "linf", "grid_min": None,
                                         "grid_max": None, "grid_step": None,
                                         "iterations": 10, "out": None}),
    "sweep-beta": (_cmd_sweep_beta, lambda: {**DATA_DEFAULTS, **ATTACK_DEFAULTS,
                                             **EVAL_DEFAULTS, "model": None,
                                             "values": "0,1e-4,1e-3,1e-2",
                                             "out": None}),
    "transfer": (_cmd_transfer, lambda: {**DATA_DEFAULTS, **ATTACK_DEFAULTS,
                                         **EVAL_DEFAULTS, "model": None,
                                         "target": None,
                                         "kappas": "0,10,20,30,40,50",
                                         "out": None}),
    "advtrain": (_cmd_advtrain, lambda: {**DATA_DEFAULTS, **TRAIN_DEFAULTS,
                                         **ATTACK_DEFAULTS, **EVAL_DEFAULTS,
                                         "temperature": 1.0, "sources": 100,
                                         "out": None}),
    "report": (_cmd_report, lambda: {"inputs": None, "seed": 0, "out": None}),
}


def dispatch(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    if not argv:
        print(USAGE, file=sys.stderr)
        return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(USAGE, file=sys.stderr)
        return 2
    if args.subcommand is None:
        print(USAGE, file=sys.stderr)
        return 2
    command, defaults = _COMMANDS[args.subcommand]
    try:
        options = resolve_options(args, defaults())
        return command(options)
    except BrokenPipeError:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    return dispatch(list(argv))


if __name__ == "__main__":
    sys.exit(main())
