"""Command-line entry point: ``copydetect <command> [flags]``.

Commands: gen-data, train, embed, match, eval, sweep, compare. Every command
accepts ``--config path.json`` holding an object of flag values (keys are the
long flag names with dashes or underscores); flags given on the command line
override it.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training
divergence, 5 checkpoint mismatch, 6 malformed input file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import core, encoder, evaluator, matcher, synth, trainer
from .objectives import LossConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_PARSE = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fractions(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


# -- gt file -----------------------------------------------------------------

def read_gt(path) -> list[tuple[int, int]]:
    pairs = []
    with open(path, newline="") as f:
        rows = csv.reader(f)
        if next(rows, None) != ["query_id", "ref_id"]:
            raise matcher.PredictionsParseError("expected header query_id,ref_id", 1)
        for line, row in enumerate(rows, start=2):
            try:
                q, r = row
                pairs.append((int(q), int(r)))
            except ValueError:
                raise matcher.PredictionsParseError(f"expected two integer ids, got {row}", line) from None
    return pairs


# -- commands ----------------------------------------------------------------

def cmd_gen_data(a) -> None:
    cfg = synth.SynthConfig(seed=a.seed, refs=a.refs, pos_queries=a.pos_queries, easy_neg=a.easy_neg,
                            hard_neg=a.hard_neg, train_images=a.train_images, train_pairs=a.train_pairs,
                            similar_fraction=a.similar_fraction)
    m = synth.build_dataset(cfg, a.out)
    hard = len(m.hard_negative_query_ids)
    print(f"references {len(m.references)}")
    print(f"queries {len(m.queries)} (positive {a.pos_queries}, easy negative {a.easy_neg}, hard negative {hard})")
    print(f"train images {len(m.train_images)} (hard-negative pairs {len(m.train_hard_negative_pairs())})")
    print(f"wrote {a.out}")


def _train_config(a) -> trainer.TrainConfig:
    loss = LossConfig(lam=a.lam, cosface_scale=a.cosface_scale, cosface_margin=a.cosface_margin,
                      triplet_margin=a.triplet_margin)
    return trainer.TrainConfig(mode=a.mode, epochs=a.epochs, batch_size=a.batch_size, lr=a.lr,
                               momentum=a.momentum, weight_decay=a.weight_decay, seed=a.seed, loss=loss,
                               hardneg_fraction=a.hardneg_fraction, hidden=a.hidden, dim=a.dim,
                               features=a.features, proxy_lr_mult=a.proxy_lr_mult)


def cmd_train(a) -> None:
    cfg = _train_config(a)
    dataset = synth.load_dataset(a.data)
    try:
        params, log = trainer.train(cfg, dataset, verbose=a.verbose)
    except trainer.DivergenceDetected as e:
        raise CliError(EXIT_DIVERGED, str(e)) from None
    encoder.save_params(a.out, params)
    log_path = a.log or str(Path(a.out).with_suffix(".log.csv"))
    log.write_csv(log_path)
    last = log.rows[-1]
    print(f"final loss {last['loss']:.6f}")
    print(f"held-out mean ratio {last['mean_ratio_heldout']:.6f}")
    print(f"wrote {a.out} and {log_path}")


def cmd_embed(a) -> None:
    dataset = synth.load_dataset(a.data)
    try:
        params = encoder.load_params(a.checkpoint)
    except encoder.CheckpointError as e:
        raise CliError(EXIT_CHECKPOINT, str(e)) from None
    width, _, dim, _ = params.dims
    m = dataset.manifest
    pixels = m.image_size * m.image_size
    if width != encoder.input_width(pixels, params.features):
        raise CliError(EXIT_CHECKPOINT, f"checkpoint input width {width} does not fit "
                                        f"{m.image_size}x{m.image_size} images")
    if a.dim is not None and a.dim != dim:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint descriptor dim {dim} does not match --dim {a.dim}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ids in (("refs", m.references), ("queries", m.queries)):
        descs = encoder.embed(params, [dataset.image(i) for i in ids])
        core.write_descriptors(out / f"{name}.asld", descs, dim)
        print(f"{name}: {len(descs)} descriptors of dim {dim}")


def _match_config(a) -> matcher.MatchConfig:
    return matcher.MatchConfig(k=a.k, eps=a.eps, tau=a.tau, delta=a.delta, filter_enabled=a.filter)


def cmd_match(a) -> None:
    cfg = _match_config(a)
    index = matcher.build_index(core.read_descriptors(a.refs))
    queries = core.read_descriptors(a.queries, expected_dim=index.dim)
    errors = []
    preds = matcher.match_all(queries, index, cfg, errors)
    matcher.write_predictions(a.out, preds)
    for qid, msg in errors:
        print(f"skipped query {qid}: {msg}", file=sys.stderr)
    print(f"{len(preds)} predictions for {len(queries)} queries (filter {'on' if cfg.filter_enabled else 'off'})")


def cmd_eval(a) -> None:
    preds = matcher.read_predictions(a.predictions)
    gt = read_gt(a.gt)
    report = evaluator.evaluate(preds, gt, a.n)
    Path(a.out).write_text(report.to_json() + "\n")
    print(report.table())


def cmd_sweep(a) -> None:
    m = synth.DatasetManifest.from_json(Path(a.manifest).read_text())
    index = matcher.build_index(core.read_descriptors(a.refs))
    queries = core.read_descriptors(a.queries, expected_dim=index.dim)
    hard = m.hard_negative_query_ids
    base = [q for q in m.queries if q not in set(hard)]
    curve = evaluator.sweep_hard_negatives(queries, index, _match_config(a), base, hard, m.gt_pairs(),
                                           a.fractions)
    evaluator.write_sweep_csv(a.out, curve)
    if a.svg:
        Path(a.svg).write_text(evaluator.sweep_svg(curve))
    for f, ap in curve:
        print(f"{f:.4g}\t{ap:.6f}")


def cmd_compare(a) -> None:
    before = evaluator.EvalReport.from_json(Path(a.before).read_text())
    after = evaluator.EvalReport.from_json(Path(a.after).read_text())
    print(evaluator.render_delta(before, after, a.format))


# -- parser ------------------------------------------------------------------

def _add_match_flags(p) -> None:
    d = matcher.MatchConfig()
    p.add_argument("--k", type=int, default=d.k, help="candidates kept per query")
    p.add_argument("--eps", type=float, default=d.eps, help="minimum cosine similarity of a candidate")
    p.add_argument("--tau", type=float, default=d.tau, help="norm-ratio threshold")
    p.add_argument("--delta", type=float, default=d.delta, help="tolerance added to tau")
    p.add_argument("--filter", type=_on_off, default="on" if d.filter_enabled else "off", metavar="{on,off}",
                   help="apply the norm-ratio filter")


# Fallback help for flags whose name says it all; argparse only prints a
# default next to a non-empty help string.
_HELP = {
    "seed": "random seed", "refs": "number of reference images", "pos_queries": "edited-copy queries",
    "easy_neg": "unrelated negative queries", "hard_neg": "hard-negative queries",
    "train_images": "base training images", "train_pairs": "directed hard-negative training pairs",
    "mode": "training objective", "epochs": "passes over the base images", "batch_size": "samples per step",
    "lr": "learning rate", "momentum": "SGD momentum", "weight_decay": "L2 penalty on network weights",
    "cosface_scale": "CosFace logit scale", "cosface_margin": "CosFace additive margin",
    "triplet_margin": "triplet hinge margin", "hidden": "hidden units", "dim": "descriptor dimension",
    "features": "network input features", "checkpoint": "encoder checkpoint",
    "predictions": "predictions CSV", "fractions": "comma-separated hard-negative fractions",
    "format": "output format",
}


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def _format_action(self, action):
        if not action.help and action.option_strings:
            action.help = _HELP.get(action.dest, action.dest.replace("_", " "))
        return super()._format_action(action)

    def _get_help_string(self, action):
        if action.default is None or action.required:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    parser = argparse.ArgumentParser(prog="copydetect", description="Asymmetric image copy detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", help="JSON file of flag values; command-line flags override it")
        p.set_defaults(fn=fn)
        return p

    s = synth.SynthConfig()
    p = command("gen-data", cmd_gen_data, "Generate a seeded synthetic dataset.")
    p.add_argument("--seed", type=int, default=s.seed)
    p.add_argument("--refs", type=int, default=s.refs)
    p.add_argument("--pos-queries", type=int, default=s.pos_queries)
    p.add_argument("--easy-neg", type=int, default=s.easy_neg)
    p.add_argument("--hard-neg", type=int, default=s.hard_neg)
    p.add_argument("--train-images", type=int, default=s.train_images)
    p.add_argument("--train-pairs", type=int, default=s.train_pairs)
    p.add_argument("--similar-fraction", type=float, default=s.similar_fraction,
                   help="share of hard negatives built from a shared layout rather than a larger scene")
    p.add_argument("--out", required=True, help="output directory")

    t, lc = trainer.TrainConfig(), LossConfig()
    p = command("train", cmd_train, "Train the encoder on a generated dataset.")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    p.add_argument("--mode", choices=[m.value for m in trainer.Mode], default=t.mode.value)
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--momentum", type=float, default=t.momentum)
    p.add_argument("--weight-decay", type=float, default=t.weight_decay)
    p.add_argument("--proxy-lr-mult", type=float, default=t.proxy_lr_mult,
                   help="learning-rate multiplier for the class proxies")
    p.add_argument("--seed", type=int, default=t.seed)
    p.add_argument("--lam", type=float, default=lc.lam, help="weight of the metric term")
    p.add_argument("--cosface-scale", type=float, default=lc.cosface_scale)
    p.add_argument("--cosface-margin", type=float, default=lc.cosface_margin)
    p.add_argument("--triplet-margin", type=float, default=lc.triplet_margin)
    p.add_argument("--hardneg-fraction", type=float, default=t.hardneg_fraction,
                   help="share of each batch given to annotated hard-negative pairs")
    p.add_argument("--hidden", type=int, default=t.hidden)
    p.add_argument("--dim", type=int, default=t.dim)
    p.add_argument("--features", choices=encoder.FEATURES, default=t.features)
    p.add_argument("--verbose", action="store_true", help="print one line per epoch")

    p = command("embed", cmd_embed, "Write reference and query descriptors (refs.asld, queries.asld).")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dim", type=int, default=None, help="expected descriptor dim (checked against the checkpoint)")
    p.add_argument("--out", required=True, help="output directory")

    p = command("match", cmd_match, "Match query descriptors against reference descriptors.")
    p.add_argument("--refs", required=True, help="reference descriptors (.asld)")
    p.add_argument("--queries", required=True, help="query descriptors (.asld)")
    p.add_argument("--out", required=True, help="predictions CSV")
    _add_match_flags(p)

    p = command("eval", cmd_eval, "Score a predictions CSV against ground truth.")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gt", required=True, help="gt.csv with header query_id,ref_id")
    p.add_argument("--n", type=int, default=None, help="top-N size (default: number of queries with a true match)")
    p.add_argument("--out", required=True, help="report JSON")

    p = command("sweep", cmd_sweep, "µAP as hard-negative queries are added.")
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--refs", required=True, help="reference descriptors (.asld)")
    p.add_argument("--queries", required=True, help="query descriptors (.asld)")
    p.add_argument("--fractions", type=_fractions, default="0,0.25,0.5,0.75,1",
                   help="comma-separated hard-negative fractions")
    p.add_argument("--out", required=True, help="sweep CSV")
    p.add_argument("--svg", help="optional SVG line plot")
    _add_match_flags(p)
    p.set_defaults(filter="off")

    p = command("compare", cmd_compare, "Signed differences between two report JSON files (after - before).")
    p.add_argument("before")
    p.add_argument("after")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    # find --config and the command before the full parse, which would
    # otherwise reject required flags that the file supplies
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    subparsers = next(a for a in parser._subparsers._group_actions).choices
    command = next((x for x in rest if x in subparsers), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    try:
        values = json.loads(Path(known.config).read_text())
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read config {known.config}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, f"config {known.config}: {e}") from None
    if not isinstance(values, dict):
        raise CliError(EXIT_CONFIG, f"config {known.config} must hold a JSON object")
    subparser = subparsers[command]
    known_dests = {a.dest for a in subparser._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known_dests or dest in ("help", "config"):
            raise CliError(EXIT_CONFIG, f"config {known.config}: unknown option {key!r} for {command}")
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    for action in subparser._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as e:
        # argparse has already printed usage or help
        return int(e.code or 0)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    try:
        args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except synth.ConfigInvalid as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (matcher.PredictionsParseError, core.DescriptorFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (encoder.CheckpointError, encoder.ShapeMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except evaluator.EmptyGroundTruth as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        where = f" {e.filename}" if e.filename else ""
        print(f"error: I/O failure{where}: {e.strerror or e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
