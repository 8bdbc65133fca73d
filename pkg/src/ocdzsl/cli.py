"""Command-line entry point.

Subcommands: synth, train, generate-ocd, eval, ablate, sweep. Every run
writes its fully resolved configuration to ``<out>/config.txt`` in the
same ``key = value`` format the ``--config`` option reads, so an output
directory is self-describing and reproducible. Precedence is
flag > config file > default; unknown config keys are rejected.

Exit codes: 0 ok, 2 usage/validation, 3 I/O or file format, 4 training
failure (non-finite numbers, broken state), 5 protocol/data mismatch.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .dataset import SynthConfig, load_dataset, make_synthetic, save_dataset, split_gzsl
from .errors import (
    DataError,
    DimensionError,
    FormatError,
    NumericError,
    ParameterError,
    ProtocolError,
    StateError,
)
from .losses import Hyperparams
from .numgrad import Rng
from .ocd import OCDParams, generate_ocd
from .train import (
    TrainConfig,
    load_checkpoint,
    run_pipeline,
    save_checkpoint,
    write_history_csv,
)


@dataclass
class Opt:
    key: str
    type: type
    default: object
    help: str
    required: bool = False
    choices: tuple | None = None


_TRAIN_KNOBS = [
    Opt("protocol", str, "zsl", "evaluation protocol the run trains for", choices=("zsl", "gzsl")),
    Opt("seed", int, 0, "master seed"),
    Opt("epochs1", int, 50, "CVAE pretraining epochs"),
    Opt("epochs2", int, 50, "regressor metric-training epochs"),
    Opt("epochs3", int, 50, "joint fine-tuning epochs"),
    Opt("use_ocd", bool, True, "synthesize hard samples in the third phase"),
    Opt("use_obtl", bool, True, "apply the online batch triplet loss"),
    Opt("use_cl", bool, True, "apply the center loss"),
    Opt("batch_size", int, 256, "minibatch rows"),
    Opt("latent_dim", int, 100, "latent dimensionality"),
    Opt("hidden_dim", int, 512, "hidden layer width"),
    Opt("alpha", float, 0.4, "triplet margin"),
    Opt("lambda_c", float, 0.1, "weight of the generated-sample read-back loss"),
    Opt("lambda_r", float, 0.1, "weight of the attribute regression loss (second phase)"),
    Opt("lambda_reg", float, 0.1, "weight of the decoder anchoring regularizer"),
    Opt("mu_hp", float, 0.0, "mean of the class-approximation latent draws"),
    Opt("sigma_hp", float, 0.12, "std of the class-approximation latent draws"),
    Opt("sigma_prime_hp", float, 0.5, "std around midpoint latents for hard samples"),
    Opt("ocd_per_class", int, 500, "hard samples synthesized per class"),
    Opt("center_lr", float, 0.5, "center update rate"),
    Opt("lr", float, 1e-3, "Adam learning rate"),
    Opt("split_ratio", float, 0.8, "per-class train fraction for gzsl"),
]

_COMMAND_OPTS: dict[str, list[Opt]] = {
    "synth": [
        Opt("seen", int, 8, "number of seen classes"),
        Opt("unseen", int, 4, "number of unseen classes"),
        Opt("per_class", int, 100, "samples per class"),
        Opt("dx", int, 16, "feature dimensionality"),
        Opt("attr", int, 8, "attribute dimensionality"),
        Opt("spread", float, 1.0, "within-class feature std"),
        Opt("separation", float, 2.0, "scale of class attribute prototypes"),
        Opt("attr_noise", float, 0.1, "std of feature-center offsets"),
        Opt("seed", int, 0, "generator seed"),
    ],
    "train": [Opt("data", str, None, "dataset directory", required=True)] + _TRAIN_KNOBS,
    "generate-ocd": [
        Opt("data", str, None, "dataset directory", required=True),
        Opt("checkpoint", str, None, "trained checkpoint file", required=True),
        Opt("classes", str, "unseen", "class set to synthesize between",
            choices=("unseen", "seen", "all")),
        Opt("per_class", int, 0, "hard samples per class (0 = checkpoint default)"),
        Opt("seed", int, 0, "generation seed"),
    ],
    "eval": [
        Opt("data", str, None, "dataset directory", required=True),
        Opt("checkpoint", str, None, "trained checkpoint file", required=True),
        Opt("protocol", str, "", "zsl or gzsl (default: the checkpoint's protocol)",
            choices=("", "zsl", "gzsl")),
        Opt("seed", int, -1, "gzsl split seed (default: the checkpoint's seed)"),
    ],
    "ablate": [Opt("data", str, None, "dataset directory", required=True)] + _TRAIN_KNOBS,
    "sweep": [
        Opt("data", str, None, "dataset directory", required=True),
        Opt("param", str, None, "swept knob", required=True,
            choices=("ocd_per_class", "sigma_prime_hp")),
        Opt("values", str, None, "comma-separated grid values", required=True),
    ]
    + _TRAIN_KNOBS,
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocdzsl",
                                     description="hard-sample zero-shot-learning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in _COMMAND_OPTS.items():
        p = sub.add_parser(command)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="key = value overrides file")
        for opt in opts:
            if opt.type is bool:
                p.add_argument(_flag(opt.key), dest=opt.key, default=None,
                               action=argparse.BooleanOptionalAction, help=opt.help)
            else:
                p.add_argument(_flag(opt.key), dest=opt.key, default=None, type=opt.type,
                               choices=opt.choices, help=opt.help)
    return parser


def _parse_config_value(opt: Opt, raw: str, path: str, line_no: int):
    raw = raw.strip()
    try:
        if opt.type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return opt.type(raw)
    except ValueError as err:
        raise ParameterError(f"{path}: line {line_no}: {err}") from None


def _read_config_file(path: str, opts: list[Opt]) -> dict:
    by_key = {o.key: o for o in opts}
    out: dict = {}
    try:
        text = Path(path).read_text("utf-8")
    except OSError as err:
        raise FormatError(f"{path}: {err}") from None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ParameterError(f"{path}: line {line_no}: expected 'key = value'")
        if key not in by_key:
            raise ParameterError(f"{path}: line {line_no}: unknown key {key!r}")
        out[key] = _parse_config_value(by_key[key], value, path, line_no)
    return out


def resolve_options(args: argparse.Namespace, command: str) -> dict:
    """Apply precedence flag > config file > declared default."""
    opts = _COMMAND_OPTS[command]
    resolved = {o.key: o.default for o in opts}
    if args.config:
        resolved.update(_read_config_file(args.config, opts))
    for opt in opts:
        flag_value = getattr(args, opt.key)
        if flag_value is not None:
            resolved[opt.key] = flag_value
    for opt in opts:
        if opt.required and resolved[opt.key] is None:
            raise ParameterError(f"missing required option {_flag(opt.key)}")
    return resolved


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config_echo(out_dir: Path, command: str, resolved: dict) -> None:
    lines = [f"# command: {command}"]
    lines += [f"{key} = {_format_value(value)}" for key, value in sorted(resolved.items())]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n", "utf-8")


def _train_config(resolved: dict) -> TrainConfig:
    hp = Hyperparams(
        lambda_c=resolved["lambda_c"],
        lambda_r=resolved["lambda_r"],
        lambda_reg=resolved["lambda_reg"],
        batch_size=resolved["batch_size"],
        mu_hp=resolved["mu_hp"],
        sigma_hp=resolved["sigma_hp"],
        sigma_prime_hp=resolved["sigma_prime_hp"],
        alpha=resolved["alpha"],
        latent_dim=resolved["latent_dim"],
        hidden_dim=resolved["hidden_dim"],
        ocd_samples_per_class=resolved["ocd_per_class"],
        center_lr=resolved["center_lr"],
        learning_rate=resolved["lr"],
    )
    config = TrainConfig(
        hp=hp,
        epochs_phase1=resolved["epochs1"],
        epochs_phase2=resolved["epochs2"],
        epochs_phase3=resolved["epochs3"],
        use_ocd=resolved["use_ocd"],
        use_obtl=resolved["use_obtl"],
        use_cl=resolved["use_cl"],
        protocol=resolved["protocol"],
        seed=resolved["seed"],
        split_ratio=resolved["split_ratio"],
    )
    config.validate()
    return config


def cmd_synth(resolved: dict, out_dir: Path) -> None:
    config = SynthConfig(
        num_seen=resolved["seen"],
        num_unseen=resolved["unseen"],
        samples_per_class=resolved["per_class"],
        d_x=resolved["dx"],
        attr_dim=resolved["attr"],
        class_spread=resolved["spread"],
        class_separation=resolved["separation"],
        attribute_noise=resolved["attr_noise"],
        seed=resolved["seed"],
    )
    dataset = make_synthetic(config)
    save_dataset(dataset, out_dir)
    print(f"wrote dataset: N={dataset.num_samples} C={dataset.num_classes} "
          f"S={dataset.seen_classes.size} U={dataset.unseen_classes.size} "
          f"d_x={dataset.feature_dim} L={dataset.attr_dim} -> {out_dir}")


def cmd_train(resolved: dict, out_dir: Path) -> None:
    config = _train_config(resolved)
    dataset = load_dataset(resolved["data"])
    model = run_pipeline(dataset, config)
    save_checkpoint(model, out_dir / "checkpoint.bin")
    write_history_csv(model.history, out_dir / "history.csv")
    final = model.history[-1].total if model.history else float("nan")
    print(f"trained {config.protocol} model ({len(model.history)} epoch rows, "
          f"final epoch loss {final:.6g}) -> {out_dir / 'checkpoint.bin'}")


def cmd_generate_ocd(resolved: dict, out_dir: Path) -> None:
    dataset = load_dataset(resolved["data"])
    model = load_checkpoint(resolved["checkpoint"])
    hp = model.config.hp
    which = resolved["classes"]
    if which == "unseen":
        class_ids = np.sort(dataset.unseen_classes)
    elif which == "seen":
        class_ids = np.sort(dataset.seen_classes)
    else:
        class_ids = np.sort(np.concatenate([dataset.seen_classes, dataset.unseen_classes]))
    if class_ids.size == 0:
        raise DataError(f"dataset has no {which} classes to synthesize between")
    params = OCDParams(
        mu_hp=hp.mu_hp,
        sigma_hp=hp.sigma_hp,
        sigma_prime_hp=hp.sigma_prime_hp,
        samples_per_class=resolved["per_class"] or hp.ocd_samples_per_class,
        forbid_fixed_points=model.config.forbid_fixed_points,
        batch_rows=hp.batch_size,
    )
    batch = generate_ocd(model.encoder, model.decoder, dataset.attributes[class_ids],
                         params, Rng(resolved["seed"]), class_ids=class_ids)
    from .dataset import Dataset

    dump = Dataset(
        features=batch.x_oc.astype("<f4").astype(np.float64),
        labels=batch.labels,
        attributes=dataset.attributes,
        seen_classes=dataset.seen_classes,
        unseen_classes=dataset.unseen_classes,
    )
    save_dataset(dump, out_dir)
    print(f"wrote {len(batch)} hard samples over {class_ids.size} classes -> {out_dir}")


def cmd_eval(resolved: dict, out_dir: Path) -> None:
    dataset = load_dataset(resolved["data"])
    model = load_checkpoint(resolved["checkpoint"])
    protocol = resolved["protocol"] or model.config.protocol
    seed = model.config.seed if resolved["seed"] < 0 else resolved["seed"]
    if protocol == "gzsl":
        split = split_gzsl(dataset, model.config.split_ratio, seed)
        metrics = ev.eval_gzsl(model, dataset, split)
        headline = f"A={metrics.A:.1f} B={metrics.B:.1f} H={metrics.H:.1f}"
    else:
        metrics = ev.eval_zsl(model, dataset)
        headline = f"mean per-class acc={metrics.mean_per_class_acc:.1f}"
    ev.write_metrics_csv(metrics, seed, out_dir / "metrics.csv")
    (out_dir / "metrics.jsonl").write_text(ev.metrics_to_json(metrics, seed) + "\n", "utf-8")
    print(f"{protocol}: {headline} -> {out_dir}")


def cmd_ablate(resolved: dict, out_dir: Path) -> None:
    config = _train_config(resolved)
    dataset = load_dataset(resolved["data"])
    rows = ev.run_ablation(dataset, config)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        fh.write("setting,accuracy\n")
        for name, acc in rows:
            fh.write(f"{name},{acc!r}\n")
    for name, acc in rows:
        print(f"{name:>12s}  {acc:.1f}")


def write_line_chart(path, xs, ys, xlabel: str, ylabel: str, title: str) -> None:
    """Tiny standalone SVG line chart (accuracy vs parameter)."""
    width, height, margin = 640, 440, 60
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = 0.0, 100.0
    x_span = (x_hi - x_lo) or 1.0

    def sx(x):
        return margin + (x - x_lo) / x_span * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 16}" text-anchor="middle" '
        f'font-size="12">{xlabel}</text>',
        f'<text x="18" y="{height / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {height / 2:.0f})">{ylabel}</text>',
        f'<polyline points="{points}" fill="none" stroke="steelblue" stroke-width="2"/>',
    ]
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="steelblue"/>')
    for tick in (0, 25, 50, 75, 100):
        parts.append(f'<text x="{margin - 8}" y="{sy(tick):.1f}" text-anchor="end" '
                     f'font-size="10">{tick}</text>')
    parts.append(f'<text x="{sx(x_lo):.1f}" y="{height - margin + 16}" text-anchor="middle" '
                 f'font-size="10">{x_lo:g}</text>')
    parts.append(f'<text x="{sx(x_hi):.1f}" y="{height - margin + 16}" text-anchor="middle" '
                 f'font-size="10">{x_hi:g}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", "utf-8")


def cmd_sweep(resolved: dict, out_dir: Path) -> None:
    config = _train_config(resolved)
    dataset = load_dataset(resolved["data"])
    param = "ocd_samples_per_class" if resolved["param"] == "ocd_per_class" else resolved["param"]
    try:
        values = [float(tok) for tok in resolved["values"].split(",") if tok.strip()]
    except ValueError as err:
        raise ParameterError(f"bad --values list: {err}") from None
    rows = ev.run_sweep(dataset, config, param, values)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        fh.write(f"{param},accuracy\n")
        for value, acc in rows:
            fh.write(f"{value!r},{acc!r}\n")
    write_line_chart(out_dir / "sweep.svg", [v for v, _ in rows], [a for _, a in rows],
                     param, "accuracy (%)", f"accuracy vs {param}")
    for value, acc in rows:
        print(f"{value:g}  {acc:.1f}")


_DISPATCH = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate-ocd": cmd_generate_ocd,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        resolved = resolve_options(args, args.command)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config_echo(out_dir, args.command, resolved)
        _DISPATCH[args.command](resolved, out_dir)
        return 0
    except (ParameterError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ProtocolError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    raise SystemExit(main())
