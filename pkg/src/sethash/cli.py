"""``sethash`` command line: synthesis, training, encoding, retrieval and checks.

Exit status is 0 on success, 1 on a usage error and 2 on a data or model
error. Metrics go to stdout as ``key<TAB>value`` lines; diagnostics go to
stderr.

Every subcommand accepts ``--config FILE``, a plain ``key = value`` file
whose keys are the subcommand's long option names (dashes or underscores).
Flags given on the command line override the file.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import hashnet
from .dataset import (
    ImageSet,
    expand_sets,
    load_dataset,
    save_dataset,
    synth_dataset,
    synth_gallery_query,
)
from .dictionary import kmeans_fit, save_dictionary
from .errors import SetHashError
from .retrieval import (
    CodeFile,
    encode_features,
    group_codes,
    image_baseline_map,
    mean_average_precision,
    nn_classify_accuracy,
    query,
    load_codes,
    save_codes,
)
from .setfeat import FEATURE_MODES, aggregate_batch, infer_mode
from .trainer import TrainConfig, evaluate_map, grad_check, grad_check_instance, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as exit status 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Argument types


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _nonneg_float(text):
    value = float(text)
    if not (value >= 0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"expected a finite value >= 0, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not (value > 0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"expected a finite value > 0, got {text}")
    return value


def _int_list(text):
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive widths, got {text!r}")
    return values


def _alpha(text):
    if text == "auto":
        return None
    return _nonneg_float(text)


def _bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# Parser


def _add_train_options(p):
    p.add_argument("--bits", type=_positive_int, help="code length (last layer width)")
    p.add_argument("--layers", type=_int_list, help="hidden and output widths, e.g. 512,32")
    p.add_argument("--k", type=_positive_int, default=16, help="codebook size")
    p.add_argument("--kmeans-iters", type=_positive_int, default=100)
    p.add_argument("--epochs", type=_nonneg_int, default=200)
    p.add_argument("--triplets-per-epoch", type=_positive_int, default=3000)
    p.add_argument("--batch", type=_positive_int, default=30)
    p.add_argument("--lr", type=_positive_float, default=0.05)
    p.add_argument("--momentum", type=_nonneg_float, default=0.9)
    p.add_argument("--lambda1", type=_nonneg_float, default=1.0)
    p.add_argument("--lambda2", type=_nonneg_float, default=0.1)
    p.add_argument("--alpha", type=_alpha, default=None, metavar="auto|X")
    p.add_argument("--features", choices=FEATURE_MODES, default="all")
    p.add_argument("--quantization", choices=("mean", "sum"), default="mean")
    p.add_argument("--standardize", type=_bool, default=True, metavar="true|false")
    p.add_argument("--dictionary-refresh", type=_nonneg_int, default=0)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sethash", description="Set-level binary hashing of feature-vector sets.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="key=value file of option defaults")
        return p

    p = command("synth", "generate a synthetic labelled dataset")
    p.add_argument("--classes", type=_positive_int, default=10)
    p.add_argument("--sets-per-class", type=_positive_int, default=10)
    p.add_argument("--set-size", type=_positive_int, default=10)
    p.add_argument("--dim", type=_positive_int, default=32)
    p.add_argument("--separation", type=_nonneg_float, default=10.0)
    p.add_argument("--sigma", type=_nonneg_float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--query-per-class", type=_positive_int, help="also write held-out query sets")
    p.add_argument("--query-set-size", type=_positive_int, default=10)
    p.add_argument("--query-out", type=Path)

    p = command("expand", "replace each set by random labelled subsets")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--subsets", type=_positive_int, default=50)
    p.add_argument("--fraction", type=_positive_float, default=0.5)
    p.add_argument("--min-size", type=_positive_int, default=10)
    p.add_argument("--jitter", type=_nonneg_float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = command("kmeans", "fit a codebook on all member vectors")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--k", type=_positive_int, default=16)
    p.add_argument("--max-iters", type=_positive_int, default=100)
    p.add_argument("--tol", type=_nonneg_float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = command("train", "fit codebook and hashing network")
    p.add_argument("--in", dest="input", type=Path, required=True)
    _add_train_options(p)
    p.add_argument("--model-out", type=Path, required=True)
    p.add_argument("--log-out", type=Path)
    p.add_argument("--val", type=Path, help="query sets whose MAP is logged every epoch")
    p.add_argument("--val-gallery", type=Path, help="gallery for --val (default: --in)")

    p = command("encode", "write one binary code per set")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--features", choices=("auto", *FEATURE_MODES), default="auto")
    p.add_argument("--per-image", action="store_true", help="one code per member vector")

    p = command("query", "rank gallery codes for every query code (TSV)")
    p.add_argument("--gallery-codes", type=Path, required=True)
    p.add_argument("--query-codes", type=Path, required=True)
    p.add_argument("--topk", type=_positive_int)

    p = command("eval", "score query codes against gallery codes")
    p.add_argument("--gallery-codes", type=Path, required=True)
    p.add_argument("--query-codes", type=Path, required=True)
    p.add_argument("--metric", choices=("map", "accuracy", "baseline"), default="map")

    p = command("gradcheck", "compare analytic and finite-difference gradients")
    p.add_argument("--probes", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=_positive_int, default=1, help="independent instances, seeds seed..seed+trials-1")
    p.add_argument("--features", choices=FEATURE_MODES, default="all")
    p.add_argument("--tol", type=_positive_float, default=1e-4)

    p = command("ablate", "train and score each aggregation mode on the same data")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--gallery", type=Path, required=True)
    p.add_argument("--queries", type=Path, required=True)
    _add_train_options(p)
    p.add_argument("--modes", default=",".join(FEATURE_MODES))
    return parser


# ---------------------------------------------------------------------------
# Config files


def read_config(path: Path) -> list[tuple[str, str]]:
    """``key = value`` pairs; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs.append((key.replace("_", "-"), value))
    return pairs


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown command {name}")


def _config_argv(sub: argparse.ArgumentParser, pairs) -> list[str]:
    flags = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                flags[opt[2:]] = action
    argv = []
    for key, value in pairs:
        action = flags.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {sub.prog}")
        if action.nargs == 0:
            try:
                enabled = _bool(value)
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
            if enabled:
                argv.append(f"--{key}")
        else:
            argv += [f"--{key}", value]
    return argv


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = _subparser(parser, args.command)
    extra = _config_argv(sub, read_config(args.config))
    # file values go first so that explicit flags, parsed later, win
    pos = argv.index(args.command)
    return parser.parse_args([*argv[:pos + 1], *extra, *argv[pos + 1:]])


# ---------------------------------------------------------------------------
# Validation helpers


def _need_file(*paths):
    for path in paths:
        if path is not None and not Path(path).is_file():
            raise UsageError(f"no such file: {path}")


def _need_dir(*paths):
    for path in paths:
        if path is not None and not Path(path).resolve().parent.is_dir():
            raise UsageError(f"output directory does not exist: {Path(path).parent}")


def _emit(key, value):
    if isinstance(value, float):
        value = f"{value:.4f}"
    print(f"{key}\t{value}")


def _train_config(args) -> TrainConfig:
    layers = args.layers
    if layers is None:
        layers = (512, args.bits if args.bits is not None else 32)
    elif args.bits is not None and layers[-1] != args.bits:
        raise UsageError(f"--bits {args.bits} disagrees with last --layers width {layers[-1]}")
    return TrainConfig(
        layers=layers,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        alpha=args.alpha,
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch,
        triplets_per_epoch=args.triplets_per_epoch,
        epochs=args.epochs,
        k=args.k,
        kmeans_iters=args.kmeans_iters,
        features=args.features,
        seed=args.seed,
        dictionary_refresh=args.dictionary_refresh,
        standardize=args.standardize,
        quantization=args.quantization,
    )


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args):
    if args.query_per_class is not None and args.query_out is None:
        raise UsageError("--query-per-class needs --query-out")
    if args.query_out is not None and args.query_per_class is None:
        raise UsageError("--query-out needs --query-per-class")
    _need_dir(args.out, args.query_out)
    if args.query_per_class is None:
        data = synth_dataset(
            args.classes, args.sets_per_class, args.set_size, args.dim,
            args.separation, args.sigma, args.seed,
        )
        save_dataset(data, args.out)
    else:
        data, queries = synth_gallery_query(
            args.classes, args.sets_per_class, args.query_per_class, args.dim,
            args.separation, args.sigma, args.seed,
            gallery_set_size=args.set_size, query_set_size=args.query_set_size,
        )
        save_dataset(data, args.out)
        save_dataset(queries, args.query_out)
        _emit("query_sets", len(queries))
    _emit("sets", len(data))


def cmd_expand(args):
    _need_file(args.input)
    _need_dir(args.out)
    if args.fraction > 1:
        raise UsageError("--fraction must lie in (0, 1]")
    data = load_dataset(args.input)
    out = expand_sets(data, args.subsets, args.fraction, args.min_size, args.jitter, args.seed)
    save_dataset(out, args.out)
    _emit("sets", len(out))


def cmd_kmeans(args):
    _need_file(args.input)
    _need_dir(args.out)
    data = load_dataset(args.input)
    dictionary = kmeans_fit(data.all_members(), args.k, args.max_iters, args.tol, args.seed)
    save_dictionary(dictionary, args.out)
    _emit("k", dictionary.k)


def cmd_train(args):
    config = _train_config(args)
    _need_file(args.input, args.val, args.val_gallery)
    _need_dir(args.model_out, args.log_out)
    if args.val_gallery is not None and args.val is None:
        raise UsageError("--val-gallery needs --val")
    data = load_dataset(args.input)
    validation = None
    if args.val is not None:
        gallery = load_dataset(args.val_gallery) if args.val_gallery else data
        validation = (gallery, load_dataset(args.val))
    result = train(data, config, validation=validation)
    hashnet.save_model(result.net, result.dictionary, args.model_out)
    if args.log_out is not None:
        result.log.to_csv(args.log_out)
    _emit("epochs", len(result.log))
    if len(result.log):
        last = result.log.epochs[-1]
        for key in ("j0", "j1", "j2", "total"):
            _emit(key, f"{getattr(last, key):.6g}")
        if last.val_map is not None:
            _emit("val_map", last.val_map)


def _mode_for(net, dictionary, dim, requested):
    if requested != "auto":
        return requested
    return infer_mode(net.input_dim, dim, dictionary.k)


def cmd_encode(args):
    _need_file(args.input, args.model)
    _need_dir(args.out)
    data = load_dataset(args.input)
    net, dictionary = hashnet.load_model(args.model)
    mode = _mode_for(net, dictionary, data.dim, args.features)
    if args.per_image:
        # every member becomes its own singleton set, tagged with the parent's id
        singles = [ImageSet(s.set_id, s.label, m[None, :]) for s in data.sets for m in s.members]
        ids = [s.set_id for s in singles]
        labels = [s.label for s in singles]
        feats = aggregate_batch(singles, dictionary, mode)
    else:
        ids = [s.set_id for s in data.sets]
        labels = data.labels
        feats = aggregate_batch(data.sets, dictionary, mode)
    words = encode_features(net, feats)
    codes = CodeFile(
        np.asarray(ids, dtype=np.uint32), np.asarray(labels, dtype=np.uint32), words, net.code_bits
    )
    save_codes(codes, args.out)
    _emit("codes", len(codes))
    _emit("features", mode)


def _load_pair(args):
    _need_file(args.gallery_codes, args.query_codes)
    gallery = load_codes(args.gallery_codes)
    queries = load_codes(args.query_codes)
    return gallery, queries


def cmd_query(args):
    gallery, queries = _load_pair(args)
    index = gallery.index()
    out = sys.stdout
    out.write("query_id\trank\tgallery_id\tdistance\tlabel\n")
    for qid, code in zip(queries.set_ids, queries.codes()):
        for rank, entry in enumerate(query(index, code, args.topk), 1):
            gid = int(gallery.set_ids[entry.position])
            out.write(f"{int(qid)}\t{rank}\t{gid}\t{entry.distance}\t{entry.label}\n")


def cmd_eval(args):
    gallery, queries = _load_pair(args)
    if args.metric == "baseline":
        value = image_baseline_map(group_codes(queries.records()), group_codes(gallery.records()))
        _emit("baseline_map", value)
        return
    qs = [(code, int(label)) for code, label in zip(queries.codes(), queries.labels)]
    index = gallery.index()
    if args.metric == "map":
        _emit("map", mean_average_precision(qs, index))
    else:
        _emit("accuracy", nn_classify_accuracy(qs, index))


def cmd_gradcheck(args):
    worst = 0.0
    used = rejected = 0
    for trial in range(args.trials):
        sample, config = grad_check_instance(args.seed + trial, features=args.features)
        report = grad_check(sample, config, num_probes=args.probes, seed=args.seed + trial)
        worst = max(worst, report.max_error)
        used += report.probes_used
        rejected += report.probes_rejected
    _emit("max_rel_error", f"{worst:.3e}")
    _emit("probes_used", used)
    _emit("probes_rejected", rejected)
    passed = worst <= args.tol
    _emit("status", "pass" if passed else "fail")
    if not passed:
        print(f"sethash gradcheck: max relative error {worst:.3e} exceeds {args.tol:g}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_ablate(args):
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    bad = [m for m in modes if m not in FEATURE_MODES]
    if bad or not modes:
        raise UsageError(f"--modes must name some of {', '.join(FEATURE_MODES)}")
    base = _train_config(args)
    _need_file(args.input, args.gallery, args.queries)
    data = load_dataset(args.input)
    gallery = load_dataset(args.gallery)
    queries = load_dataset(args.queries)
    for mode in modes:
        result = train(data, replace(base, features=mode))
        _emit(f"map_{mode}", evaluate_map(result.net, result.dictionary, gallery, queries, mode))


COMMANDS = {
    "synth": cmd_synth,
    "expand": cmd_expand,
    "kmeans": cmd_kmeans,
    "train": cmd_train,
    "encode": cmd_encode,
    "query": cmd_query,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.WARNING,
            format="%(message)s",
            stream=sys.stderr,
        )
        status = COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (SetHashError, OSError) as exc:
        print(f"sethash: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if status is None else status


def main() -> None:
    sys.exit(run())
