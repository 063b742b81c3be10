"""Command-line entry point: ``anchoralign {synth,train,gradcheck,eval,analyze,heatmap}``.

Exit codes: 0 success, 2 usage error, 3 numeric abort, 4 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .embedding_io import (
    LANGUAGE,
    VISION,
    PairedDataset,
    SyntheticSpec,
    generate_synthetic,
    read_corpus,
    read_labels,
    read_pairs,
    write_corpus,
    write_labels,
    write_pairs,
)
from .errors import AnchorAlignError, CorruptionError, DataError, FormatError, NumericError, UsageError
from .evaluator import (
    anchor_overlap,
    classify_eval,
    dense_eval,
    export_heatmaps,
    retrieval_eval,
    similarity_matrix,
    write_metrics_csv,
)
from .grads import backward_batch, finite_difference_oracle, gradient_discrepancy, random_instance
from .relrep import encode, encode_pooled
from .trainer import TrainConfig, TrainingAborted, load_checkpoint, parse_key_values, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-6

log = logging.getLogger("anchoralign")


class RunContext:
    """Collects what goes into ``run_manifest.json``."""

    def __init__(self, command: str, seed=None):
        self.command = command
        self.seed = seed
        self.config = {}
        self.inputs = {}
        self.start = time.time()

    def add_input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"missing input file: {path}")
        self.inputs[str(path)] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def write(self, out_dir) -> Path:
        manifest = {
            "command": self.command,
            "tool_version": __version__,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "start": self.start,
            "end": time.time(),
        }
        path = Path(out_dir) / "run_manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _grid(text: str):
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}") from None


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    return parse_key_values(Path(path).read_text())


# ---------------------------------------------------------------------------
# data loading
# ---------------------------------------------------------------------------

def _data_paths(args) -> dict:
    split = args.split
    base = Path(args.data) if args.data else None

    def pick(explicit, suffix):
        if explicit is not None:
            return Path(explicit)
        return base / f"{split}_{suffix}" if base is not None else None

    return {
        "vision": pick(args.vision, "vision.palt"),
        "language": pick(args.language, "language.palt"),
        "pairs": pick(args.pairs, "pairs.tsv"),
        "vision_labels": pick(args.vision_labels, "vision.labels"),
        "language_labels": pick(args.language_labels, "language.labels"),
        "prompts": Path(args.prompts) if args.prompts else (base / "prompts.palt" if base is not None else None),
    }


def load_dataset(args, ctx: RunContext, need_labels: bool = False) -> PairedDataset:
    paths = _data_paths(args)
    for key in ("vision", "language", "pairs"):
        if paths[key] is None:
            raise UsageError(f"no {key} file given (use --data DIR or --{key})")
        ctx.add_input(paths[key])
    seq_v = read_corpus(paths["vision"])
    seq_l = read_corpus(paths["language"])
    pairs = read_pairs(paths["pairs"])
    labels_v = labels_l = None
    if paths["vision_labels"] is not None and paths["vision_labels"].exists():
        labels_v = read_labels(ctx.add_input(paths["vision_labels"]))
    elif need_labels:
        raise UsageError(f"missing vision label sidecar: {paths['vision_labels']}")
    if paths["language_labels"] is not None and paths["language_labels"].exists():
        labels_l = read_labels(ctx.add_input(paths["language_labels"]))
    return PairedDataset(list(seq_v), list(seq_l), pairs, labels_v, labels_l)


def load_prompts(args, ctx: RunContext) -> list:
    path = _data_paths(args)["prompts"]
    if path is None:
        raise UsageError("class prompt corpus required (--prompts)")
    return list(read_corpus(ctx.add_input(path)))


def image_class_labels(labels) -> np.ndarray:
    """Most frequent foreground concept per sample, ties to the lower id."""
    out = []
    for lab in labels:
        fg = lab[lab >= 0]
        if fg.size == 0:
            raise UsageError("sample without foreground tokens cannot be classified")
        out.append(int(np.argmax(np.bincount(fg))))
    return np.array(out)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

SYNTH_FLAGS = {
    "concepts": "num_concepts",
    "latent_dim": "latent_dim",
    "dim_v": "dim_v",
    "dim_l": "dim_l",
    "noise": "noise_sigma",
    "jitter": "instance_jitter",
    "scale_spread": "token_scale_spread",
    "train_size": "num_train",
    "test_size": "num_test",
    "seed": "seed",
    "grid": "vision_grid",
}


def _synth_spec(args) -> SyntheticSpec:
    base = SyntheticSpec()
    types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(SyntheticSpec)}
    values = {}
    for key, raw in _load_config_file(args.config).items():
        if key not in types:
            raise UsageError(f"unknown synth config key {key!r}")
        if key in ("tokens_per_sample", "concepts_per_sample"):
            values[key] = tuple(_int_list(raw))
        elif key == "vision_grid":
            values[key] = _grid(raw) if raw.lower() != "none" else None
        else:
            try:
                values[key] = types[key](raw)
            except ValueError:
                raise UsageError(f"bad value for {key}: {raw!r}") from None
    for flag, field in SYNTH_FLAGS.items():
        if getattr(args, flag) is not None:
            values[field] = getattr(args, flag)
    if args.tokens is not None:
        values["tokens_per_sample"] = tuple(args.tokens)
    if args.concepts_per_sample is not None:
        values["concepts_per_sample"] = tuple(args.concepts_per_sample)
    for key in ("tokens_per_sample", "concepts_per_sample"):
        if key in values and len(values[key]) != 2:
            raise UsageError(f"{key} needs MIN,MAX")
    spec = dataclasses.replace(base, **values)
    spec.validate()
    return spec


def cmd_synth(args) -> int:
    spec = _synth_spec(args)
    ctx = RunContext("synth", spec.seed)
    ctx.config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(spec).items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_synthetic(spec)
    for split, ds in (("train", corpus.train), ("test", corpus.test)):
        write_corpus(ds.modality_a, out / f"{split}_vision.palt", VISION, spec.dim_v)
        write_corpus(ds.modality_b, out / f"{split}_language.palt", LANGUAGE, spec.dim_l)
        write_pairs(ds.pairs, out / f"{split}_pairs.tsv")
        write_labels(ds.labels_a, out / f"{split}_vision.labels", [s.sample_id for s in ds.modality_a], VISION)
        write_labels(ds.labels_b, out / f"{split}_language.labels", [s.sample_id for s in ds.modality_b], LANGUAGE)
    write_corpus(corpus.prompts, out / "prompts.palt", LANGUAGE, spec.dim_l)
    ctx.write(out)
    print(f"wrote {spec.num_train} train / {spec.num_test} test pairs to {out}")
    return EXIT_OK


TRAIN_FLAGS = {
    "K": "K",
    "tau_p": "tau_p",
    "tau": "tau",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "lr": "learning_rate",
    "beta1": "beta1",
    "beta2": "beta2",
    "adam_eps": "eps",
    "seed": "seed",
    "init": "init_policy",
    "pooling": "pooling",
}


def _train_config(args) -> TrainConfig:
    config = TrainConfig.from_mapping(_load_config_file(args.config))
    updates = {field: getattr(args, flag) for flag, field in TRAIN_FLAGS.items() if getattr(args, flag) is not None}
    if args.no_shuffle:
        updates["shuffle"] = False
    config = dataclasses.replace(config, **updates)
    config.validate()
    return config


def cmd_train(args) -> int:
    config = _train_config(args)
    ctx = RunContext("train", config.seed)
    ctx.config = dataclasses.asdict(config)
    dataset = load_dataset(args, ctx)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.palc"
    state = None
    if args.resume is not None:
        state = load_checkpoint(ctx.add_input(args.resume))
    try:
        state = train(dataset, config, state, log_path=out / "train_log.csv", checkpoint_path=ckpt)
    except TrainingAborted as exc:
        ctx.write(out)
        print(f"numeric abort: {exc}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(state, ckpt)
    ctx.write(out)
    final = state.epoch_losses[-1] if state.epoch_losses else float("nan")
    print(f"trained {state.step} steps; final epoch loss {final:.6f}; checkpoint {ckpt}")
    return EXIT_OK


def run_gradcheck(instances: int, seed: int, step: float = 1e-5, tau_p: float = 0.03, tau: float = 0.07,
                  fault=None, pooling: str = "cap") -> list:
    """Per-instance max relative errors between analytic and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(instances):
        batch_v, batch_l, anchors_v, anchors_l = random_instance(rng)
        analytic = backward_batch(batch_v, batch_l, anchors_v, anchors_l, tau_p, tau, pooling, fault)
        oracle = finite_difference_oracle(batch_v, batch_l, anchors_v, anchors_l, tau_p, tau, step, pooling)
        errors.append(gradient_discrepancy(analytic, oracle))
    return errors


def cmd_gradcheck(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    ctx = RunContext("gradcheck", args.seed)
    ctx.config = {"instances": args.instances, "step": args.step, "tau_p": args.tau_p, "tau": args.tau,
                  "pooling": args.pooling, "tolerance": GRADCHECK_TOLERANCE}
    fault = "drop_softmax_term" if args.break_gradient else None
    errors = run_gradcheck(args.instances, args.seed, args.step, args.tau_p, args.tau, fault, args.pooling)
    worst = int(np.argmax(errors))
    passed = errors[worst] < GRADCHECK_TOLERANCE
    lines = [f"instance {i}: max relative error {e:.3e}" for i, e in enumerate(errors)]
    summary = (f"gradcheck {'PASS' if passed else 'FAIL'}: {args.instances} instances, "
               f"worst instance {worst} with max relative error {errors[worst]:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck_report.txt").write_text("\n".join(lines + [summary]) + "\n")
        ctx.write(out)
    if args.verbose:
        print("\n".join(lines))
    print(summary)
    return EXIT_OK if passed else EXIT_VERIFY


def _load_model(args, ctx: RunContext):
    state = load_checkpoint(ctx.add_input(args.checkpoint))
    return state.config, state.anchors_v, state.anchors_l


def cmd_eval(args) -> int:
    ctx = RunContext("eval", None)
    config, anchors_v, anchors_l = _load_model(args, ctx)
    ctx.config = {"task": args.task, "ks": args.ks, "tau_p": config.tau_p, "pooling": config.pooling,
                  "fg_threshold": args.fg_threshold}
    dataset = load_dataset(args, ctx, need_labels=args.task in ("classify", "dense"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.dataset_name or args.split
    rows = []
    if args.task == "retrieval":
        h_v = encode(dataset.modality_a, anchors_v, config.tau_p, config.pooling)
        h_l = encode(dataset.modality_b, anchors_l, config.tau_p, config.pooling)
        recalls = retrieval_eval(similarity_matrix(h_v, h_l), dataset.pairs, args.ks)
        labels = {"a2b": "i2t", "b2a": "t2i"}
        for direction, by_k in recalls.items():
            for k, value in by_k.items():
                rows.append(("recall", name, labels[direction], k, value))
        summary = " ".join(f"{labels[d]} R@{k}={v:.4f}" for d, by_k in recalls.items() for k, v in by_k.items())
    elif args.task == "classify":
        prompts = load_prompts(args, ctx)
        class_h = encode(prompts, anchors_l, config.tau_p, config.pooling)
        image_h = encode(dataset.modality_a, anchors_v, config.tau_p, config.pooling)
        acc = classify_eval(image_h, class_h, image_class_labels(dataset.labels_a))
        rows.append(("top1_accuracy", name, "i2c", 1, acc))
        summary = f"top-1 accuracy={acc:.4f}"
    else:
        missing = [s.sample_id for s in dataset.modality_a if s.grid is None]
        if missing:
            raise UsageError(f"dense evaluation needs patch grids; sample {missing[0]} has none")
        prompts = load_prompts(args, ctx)
        class_h = encode(prompts, anchors_l, config.tau_p, config.pooling)
        _, miou = dense_eval(dataset.modality_a, anchors_v, class_h, dataset.labels_a, args.fg_threshold)
        rows.append(("miou_fg", name, "dense", 0, miou))
        summary = f"mIoU-fg={miou:.4f}"
    write_metrics_csv(rows, out / "metrics.csv")
    ctx.write(out)
    print(f"{args.task} on {name}: {summary}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    ctx = RunContext("analyze", args.seed)
    config, anchors_v, anchors_l = _load_model(args, ctx)
    ctx.config = {"k_top": args.k_top, "tau_p": config.tau_p, "pooling": config.pooling}
    dataset = load_dataset(args, ctx)
    p_v = encode_pooled(dataset.modality_a, anchors_v, config.tau_p, config.pooling)
    p_l = encode_pooled(dataset.modality_b, anchors_l, config.tau_p, config.pooling)
    report = anchor_overlap(p_v, p_l, dataset.pairs, args.seed, args.k_top)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "overlap_report.txt").write_text(report.to_text())
    ctx.write(out)
    print(f"hard overlap matched/mismatched {report.mean_hard_overlap_matched:.4f}/{report.mean_hard_overlap_mismatched:.4f}; "
          f"dice {report.mean_dice_matched:.4f}/{report.mean_dice_mismatched:.4f}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    ctx = RunContext("heatmap", None)
    config, anchors_v, anchors_l = _load_model(args, ctx)
    ctx.config = {"samples": args.samples, "anchors": args.anchors, "tau_p": config.tau_p, "threshold": args.threshold}
    dataset = load_dataset(args, ctx)
    K = min(anchors_v.K, anchors_l.K)
    bad = [k for k in args.anchors if not 0 <= k < K]
    if bad:
        raise UsageError(f"anchor id {bad[0]} out of range [0, {K})")
    out = Path(args.out)
    written = []
    for n in args.samples:
        if not 0 <= n < len(dataset.pairs):
            raise UsageError(f"pair index {n} out of range")
        i, j = dataset.pairs[n]
        written += export_heatmaps(dataset.modality_a[i], anchors_v, dataset.modality_b[j], anchors_l,
                                   args.anchors, config.tau_p, out / "heatmaps")
    ctx.write(out)
    print(f"wrote {len(written)} heatmap files under {out / 'heatmaps'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p, out_required=True):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="cap on internal BLAS threads")
    p.add_argument("--out", required=out_required, help="run directory for every output")
    p.add_argument("--config", default=None, help="key=value file; flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p, checkpoint=False):
    if checkpoint:
        p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory written by 'synth' (or any dir with the same file names)")
    p.add_argument("--split", default="train")
    p.add_argument("--vision")
    p.add_argument("--language")
    p.add_argument("--pairs")
    p.add_argument("--vision-labels")
    p.add_argument("--language-labels")
    p.add_argument("--prompts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchoralign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired corpus")
    _add_common(p)
    p.add_argument("--concepts", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--dim-v", type=int)
    p.add_argument("--dim-l", type=int)
    p.add_argument("--tokens", type=_int_list, help="MIN,MAX tokens per sample")
    p.add_argument("--concepts-per-sample", type=_int_list, help="MIN,MAX")
    p.add_argument("--noise", type=float)
    p.add_argument("--jitter", type=float)
    p.add_argument("--scale-spread", type=float)
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--grid", type=_grid, help="vision patch grid ROWSxCOLS")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train both anchor sets")
    _add_common(p)
    _add_data(p)
    p.add_argument("--K", type=int)
    p.add_argument("--tau-p", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--adam-eps", type=float)
    p.add_argument("--init", choices=("data_tokens", "gaussian"))
    p.add_argument("--pooling", choices=("cap", "mean", "global"))
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    _add_common(p, out_required=False)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tau-p", type=float, default=0.03)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--pooling", choices=("cap", "mean", "global"), default="cap")
    p.add_argument("--break-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="retrieval / classification / dense evaluation")
    _add_common(p)
    _add_data(p, checkpoint=True)
    p.add_argument("--task", choices=("retrieval", "classify", "dense"), required=True)
    p.add_argument("--ks", type=_int_list, default=[1, 5, 10])
    p.add_argument("--fg-threshold", type=float, default=None)
    p.add_argument("--dataset-name", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="top-k anchor overlap for matched vs mismatched pairs")
    _add_common(p)
    _add_data(p, checkpoint=True)
    p.add_argument("--k-top", type=int, default=5)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("heatmap", help="export CAP attention heatmaps")
    _add_common(p)
    _add_data(p, checkpoint=True)
    p.add_argument("--samples", type=_int_list, required=True, help="pair indices")
    p.add_argument("--anchors", type=_int_list, required=True, help="anchor ids")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("gradcheck", "analyze") and args.seed is None:
        args.seed = 0
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            return args.func(args)
    except (UsageError, FormatError, CorruptionError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AnchorAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
