"""Command-line entry point: fetch, features, train, eval, count, bench.

Exit codes: 0 success, 1 domain error, 2 usage error.  Tables go to
stdout; machine-readable artifacts (CSV, JSON lines, checkpoints) go to the
output directory together with ``config.resolved``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import model as M
from .errors import KwsError

log = logging.getLogger("lambdakws")

SUBTASKS = ("10", "20", "35")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, kind):
    if kind in (bool, "bool"):
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    if kind in ("tuple", tuple):
        return tuple(int(v) for v in value.split(","))
    return value


def resolve_config(pairs: dict):
    """Split dotted keys into train, model, augment and data settings.

    ``train.<field>`` addresses TrainConfig, ``model.<field>`` ModelSpec
    overrides, ``augment.<name>_<p|low|high>`` the augmentation policy and
    ``data.root`` the dataset directory.  Unknown keys are rejected.
    """
    from .train import TrainConfig

    train_types = {f.name: f.type for f in fields(TrainConfig)}
    model_types = {f.name: f.type for f in fields(M.ModelSpec)}
    resolved = {"train": {}, "model": {}, "augment": {}, "data": {}}
    for key, value in pairs.items():
        section, _, name = key.partition(".")
        try:
            if section == "train" and name in train_types:
                resolved["train"][name] = _coerce(value, train_types[name])
            elif section == "model" and name in model_types and name not in ("width", "num_classes"):
                resolved["model"][name] = _coerce(value, model_types[name])
            elif section == "augment" and name:
                resolved["augment"][name] = float(value)
            elif section == "data" and name == "root":
                resolved["data"]["root"] = value
            else:
                raise UsageError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    return resolved


def write_snapshot(out_dir: Path, resolved: dict):
    """Flat ``key = value`` file that reproduces the run."""
    lines = []
    for section in ("train", "model", "augment", "data"):
        for k, v in sorted(resolved.get(section, {}).items()):
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{k} = {v}")
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _load_pairs(args):
    pairs = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        pairs.update(parse_config_text(path.read_text(), str(path)))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _subtask(value):
    return int(value)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fetch(args):
    from .dataset import ARCHIVE_BYTES, ARCHIVE_URL, download

    root = Path(args.dataset_root)
    if args.synthetic:
        from .synth import make_corpus

        n = make_corpus(root, clips_per_word=args.clips_per_word, seed=args.seed)
        print(f"wrote {n} synthetic clips under {root}")
        return 0
    expected = None if args.url != ARCHIVE_URL else ARCHIVE_BYTES
    if args.expected_bytes is not None:
        expected = args.expected_bytes
    download(root, args.url, expected, keep_archive=args.keep_archive)
    print(f"extracted {args.url} under {root}")
    return 0


def cmd_features(args):
    from .frontend import features_to_csv, mel_spectrogram, read_wav

    feats = mel_spectrogram(read_wav(args.wav))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    features_to_csv(feats, out / "features.csv")
    write_snapshot(out, {"data": {"wav": str(Path(args.wav).resolve())}})
    print(f"{feats.shape[0]} x {feats.shape[1]} features -> {out / 'features.csv'}")
    return 0


def _train_setup(args):
    from .augment import AugmentationPolicy
    from .train import TrainConfig

    resolved = resolve_config(_load_pairs(args))
    tr = resolved["train"]
    if args.seed is not None:
        tr["seed"] = args.seed
    if args.model is not None:
        tr["model"] = args.model
    if args.subtask is not None:
        tr["subtask"] = _subtask(args.subtask)
    if args.dataset_root is not None:
        resolved["data"]["root"] = args.dataset_root
    if "root" not in resolved["data"]:
        raise UsageError("no dataset root: pass --dataset-root or set data.root")
    config = TrainConfig(**tr)
    resolved["train"] = {f.name: getattr(config, f.name) for f in fields(TrainConfig)}
    resolved["data"]["root"] = str(Path(resolved["data"]["root"]).resolve())
    policy = None
    if config.augment:
        policy = AugmentationPolicy(seed=config.seed).with_overrides(**resolved["augment"])
    return config, resolved, policy


def cmd_train(args):
    from .dataset import build_manifest
    from .train import train

    config, resolved, policy = _train_setup(args)
    manifest = build_manifest(resolved["data"]["root"], config.subtask)
    spec = M.named_spec(config.model, num_classes=len(manifest.classes), **resolved["model"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out, resolved)
    manifest.to_csv(out / "manifest.csv")

    def progress(rec):
        val = "-" if rec["val_loss"] is None else f"{rec['val_loss']:.4f}"
        print(f"epoch {rec['epoch']:4d}  lr {rec['lr']:.5f}  train {rec['train_loss']:.4f}  "
              f"val {val}  acc {rec['val_acc']}")

    result = train(config, manifest, out, spec=spec, policy=policy, progress=progress)
    print(f"best epoch {result.best_epoch}")
    if result.test is not None:
        print(f"test accuracy {result.test.accuracy:.4f}  auc {result.test.roc.auc:.4f}")
    return 0


def cmd_eval(args):
    import numpy as np

    from .checkpoint import load
    from .dataset import build_manifest
    from .train import TrainConfig, evaluate

    resolved = resolve_config(_load_pairs(args))
    root = args.dataset_root or resolved["data"].get("root")
    if root is None:
        raise UsageError("no dataset root: pass --dataset-root or set data.root")
    tr = resolved["train"]
    if args.seed is not None:
        tr["seed"] = args.seed
    if args.subtask is not None:
        tr["subtask"] = _subtask(args.subtask)
    config = TrainConfig(**tr)
    ckpt = load(args.checkpoint)
    manifest = build_manifest(root, config.subtask)
    report = evaluate(ckpt, manifest, args.split, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved["train"] = {f.name: getattr(config, f.name) for f in fields(TrainConfig)}
    resolved["data"]["root"] = str(Path(root).resolve())
    write_snapshot(out, resolved)
    report.roc.to_csv(out / "roc.csv")
    np.savetxt(out / "confusion.csv", report.confusion, fmt="%d", delimiter=",",
               header=",".join(manifest.classes), comments="")
    summary = {"split": args.split, "accuracy": report.accuracy, "loss": report.loss,
               "auc": report.roc.auc, "clips": int(report.confusion.sum())}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{args.split}: accuracy {report.accuracy:.4f}  auc {report.roc.auc:.4f}  "
          f"({summary['clips']} clips)")
    return 0


def cmd_count(args):
    spec = M.named_spec(args.model, num_classes=args.classes)
    params = M.count_params(spec)
    flops = M.count_flops(spec)
    print(f"model        {args.model}")
    print(f"classes      {args.classes}")
    print(f"parameters   {params}")
    print(f"multiplies   {flops}")
    if args.breakdown:
        for name, value in M.flop_breakdown(spec).items():
            print(f"  {name:28s} {value}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"model": args.model, "classes": args.classes, "parameters": params, "multiplies": flops,
                   "multiplies_by_layer": M.flop_breakdown(spec), "parameters_by_layer": M.param_breakdown(spec)}
        (out / "counts.json").write_text(json.dumps(payload, indent=2) + "\n")
        write_snapshot(out, {"model": spec.to_dict()})
    return 0


def cmd_bench(args):
    from .attention import scaling_benchmark

    try:
        sweep = [int(v) for v in args.n.split(",")]
    except ValueError as exc:
        raise UsageError(f"--n expects comma-separated integers, got {args.n!r}") from exc
    report = scaling_benchmark(args.layer, sweep, args.reps, d=args.d, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / f"scaling_{args.layer}.csv")
    write_snapshot(out, {"data": {"layer": args.layer, "n": args.n, "reps": args.reps, "d": args.d,
                                  "seed": args.seed or 0}})
    print(f"{'n':>6}  {'median ms':>10}  {'peak KiB':>9}")
    for p in report.points:
        print(f"{p.n:6d}  {p.median_ns / 1e6:10.3f}  {p.peak_bytes / 1024:9.1f}")
    flag = "  (unreliable timing)" if report.unreliable else ""
    print(f"slope {report.slope:.3f} +- {report.slope_stderr:.3f}{flag}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="lambdakws", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int)

    f = sub.add_parser("fetch", help="download and extract the dataset")
    f.add_argument("--dataset-root", required=True)
    f.add_argument("--url", default="http://download.tensorflow.org/data/speech_commands_v0.02.tar.gz")
    f.add_argument("--expected-bytes", type=int, help="archive size check (default: the official size)")
    f.add_argument("--keep-archive", action="store_true")
    f.add_argument("--synthetic", action="store_true", help="write a synthetic stand-in corpus instead")
    f.add_argument("--clips-per-word", type=int)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fetch)

    fe = sub.add_parser("features", help="dump one clip's log-mel features as CSV")
    fe.add_argument("wav")
    fe.add_argument("--out", default="features_out")
    fe.set_defaults(func=cmd_features)

    t = sub.add_parser("train", help="train a model")
    common(t, "run")
    t.add_argument("--model", choices=sorted(M.MODEL_NAMES))
    t.add_argument("--subtask", choices=SUBTASKS)
    t.add_argument("--dataset-root")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, "eval_out")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "validation", "test"))
    e.add_argument("--model", choices=sorted(M.MODEL_NAMES), help="accepted for symmetry; the checkpoint decides")
    e.add_argument("--subtask", choices=SUBTASKS)
    e.add_argument("--dataset-root")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count", help="parameter and multiply counts")
    c.add_argument("--model", choices=sorted(M.MODEL_NAMES), default="lambda-resnet18")
    c.add_argument("--classes", type=int, default=12)
    c.add_argument("--breakdown", action="store_true", help="per-layer multiplies")
    c.add_argument("--out")
    c.set_defaults(func=cmd_count)

    b = sub.add_parser("bench", help="time a layer over sequence lengths")
    b.add_argument("--layer", choices=("attention", "lambda_global", "lambda_conv"), required=True)
    b.add_argument("--n", default="64,128,256,512", help="comma-separated sequence lengths")
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--d", type=int, default=64, help="model width")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", default="bench_out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lambdakws: error: {exc}", file=sys.stderr)
        return 2
    except (KwsError, OSError) as exc:
        print(f"lambdakws: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
