"""Command-line entry point: ``maskclip <subcommand> ...``.

Exit codes: 0 success, 2 bad configuration or arguments, 3 I/O failure,
4 numerical failure (non-finite values, failed gradient audit). Failures
print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, corpus
from .config import ConfigError, TrainConfig, apply_overrides, default_dict
from .numerics import NonFiniteError

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- hashing and snapshots


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path) -> str:
    """git-style hash of a file, or of a directory as the sorted (relpath, blob hash) listing."""
    path = Path(path)
    if path.is_file():
        return git_blob_hash(path.read_bytes())
    if not path.is_dir():
        raise FileNotFoundError(f"no such file or directory: {path}")
    lines = []
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        lines.append(f"{p.relative_to(path).as_posix()} {git_blob_hash(p.read_bytes())}\n")
    return hashlib.sha1("".join(lines).encode()).hexdigest()


def write_snapshot(out_dir, command, args, config=None, inputs=None, overrides=()):
    """Record what produced a directory: command, arguments, effective config and input hashes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snap = {
        "command": command,
        "version": __version__,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "overrides", "out")},
        "overrides": list(overrides),
        "inputs": {name: {"path": str(p), "hash": content_hash(p)} for name, p in sorted((inputs or {}).items())},
    }
    if config is not None:
        snap["config"] = config.to_dict()
    path = out / f"{command}.effective.json"
    path.write_text(json.dumps(snap, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return snap


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=_plain))


def _plain(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x).__name__)


# ---------------------------------------------------------------- config resolution


def resolve_config(args) -> TrainConfig:
    d = default_dict()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from None
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from None
        d = apply_overrides(d, _flatten(loaded))
    flag_overrides = []
    if getattr(args, "seed", None) is not None:
        flag_overrides.append(("seed", args.seed))
    if getattr(args, "objective", None) is not None:
        flag_overrides.append(("objective", args.objective))
    if getattr(args, "no_ema", False):
        flag_overrides.append(("use_ema", False))
    if getattr(args, "mask_ratio", None) is not None:
        flag_overrides.append(("mask_ratio", args.mask_ratio))
    if getattr(args, "lambda_dist", None) is not None:
        flag_overrides.append(("lambda_dist", args.lambda_dist))
    if getattr(args, "beta", None) is not None:
        flag_overrides.append(("beta", args.beta))
    if getattr(args, "corpus", None):
        flag_overrides.append(("corpus", str(args.corpus)))
    d = apply_overrides(d, flag_overrides)
    d = apply_overrides(d, args.overrides or [])
    return TrainConfig.from_dict(d)


def _flatten(d, prefix=""):
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    out = []
    for k, v in d.items():
        if isinstance(v, dict):
            out.extend(_flatten(v, f"{prefix}{k}."))
        else:
            out.append((prefix + k, v))
    return out


def _load_model(path):
    from .trainer import load_model

    return load_model(path)


def _load_data(path):
    return corpus.load_corpus(path)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args):
    out = Path(args.out)
    corpus.generate_corpus(out, args.n, args.seed, force=args.force, n_objects=args.objects)
    write_snapshot(out, "gen-data", args)
    emit({"command": "gen-data", "out": str(out), "n": args.n, "seed": args.seed, "hash": content_hash(out)})
    return 0


def cmd_pretrain(args):
    from .trainer import run

    cfg = resolve_config(args)
    if not cfg.corpus:
        raise ConfigError("pretrain needs a corpus (--corpus DIR or corpus=DIR)")
    out = Path(args.out)
    inputs = {"corpus": cfg.corpus}
    if args.config:
        inputs["config"] = args.config
    if args.resume:
        inputs["resume"] = args.resume
    write_snapshot(out, "pretrain", args, cfg, inputs, args.overrides or [])
    trainer = run(cfg, out_dir=out, resume=args.resume, stop_after_epoch=args.stop_after_epoch)
    last = next((r for r in reversed(trainer.state.metrics) if r["type"] == "step"), None)
    emit({"command": "pretrain", "out": str(out), "step": trainer.state.step,
          "epoch": trainer.state.epoch, "finished": trainer.finished(), "last": last})
    return 0


def _eval_setup(args, command):
    model = _load_model(args.ckpt)
    data = _load_data(args.data)
    write_snapshot(args.out, command, args, model.cfg, {"checkpoint": args.ckpt, "data": args.data})
    return model, data


def _single_object_labels(data):
    idx = [i for i, s in enumerate(data.scenes) if s is not None and len(s.objects) == 1]
    y = np.array([corpus.SHAPES.index(data.scenes[i].objects[0].shape) for i in idx], dtype=np.int64)
    return idx, y


def cmd_eval_zeroshot(args):
    from . import evaluation as ev

    model, data = _eval_setup(args, "eval-zeroshot")
    idx, y = _single_object_labels(data)
    if not idx:
        raise ValueError("zero-shot classification needs single-object scenes in the corpus")
    bank = ev.shape_bank(model)
    pred, acc = ev.zero_shot_classify(model, data.images[idx], bank, y)
    report = {"task": "shape classification", "classes": list(bank.classes), "n": len(idx),
              "top1": acc, "predictions": pred.tolist()}
    ev.write_report(Path(args.out) / "zeroshot.json", report)
    emit({"command": "eval-zeroshot", "top1": acc, "n": len(idx)})
    return 0


def cmd_eval_seg(args):
    from . import evaluation as ev

    model, data = _eval_setup(args, "eval-seg")
    bank = ev.segmentation_bank(model)
    _, ious, miou = ev.dense_zero_shot_segment(model, data.images, bank, data.labels)
    per_class = {c: (None if np.isnan(v) else float(v)) for c, v in zip(bank.classes, ious)}
    report = {"classes": list(bank.classes), "iou": per_class, "miou": None if np.isnan(miou) else miou,
              "n": len(data)}
    ev.write_report(Path(args.out) / "segmentation.json", report)
    emit({"command": "eval-seg", "miou": report["miou"], "iou": per_class})
    return 0


def cmd_eval_retrieval(args):
    from . import evaluation as ev

    model, data = _eval_setup(args, "eval-retrieval")
    res = ev.retrieval_eval(model, data.images, data.captions)
    res["n"] = len(data)
    ev.write_report(Path(args.out) / "retrieval.json", res)
    emit({"command": "eval-retrieval", **res})
    return 0


def cmd_probe(args):
    from . import evaluation as ev

    model, data = _eval_setup(args, "probe")
    idx, y = _single_object_labels(data)
    if len(idx) < 4:
        raise ValueError("linear probe needs at least 4 single-object scenes")
    cut = int(round(args.train_frac * len(idx)))
    idx = np.asarray(idx)
    res = ev.probe_model(model, data.images[idx[:cut]], y[:cut], data.images[idx[cut:]], y[cut:])
    report = {"train_accuracy": res.train_accuracy, "test_accuracy": res.test_accuracy,
              "iterations": res.iterations, "grad_norm": res.grad_norm, "n_train": cut,
              "n_test": len(idx) - cut}
    ev.write_report(Path(args.out) / "probe.json", report)
    emit({"command": "probe", **report})
    return 0


def cmd_heatmap(args):
    from . import evaluation as ev

    model = _load_model(args.ckpt)
    inputs = {"checkpoint": args.ckpt}
    if args.image:
        image = corpus.to_float(corpus.read_ppm(args.image))
        inputs["image"] = args.image
        text = args.text
    else:
        if args.data is None:
            raise ConfigError("heatmap needs --image or --data with --index")
        data = _load_data(args.data)
        if not 0 <= args.index < len(data):
            raise ConfigError(f"--index {args.index} outside 0..{len(data) - 1}")
        image = data.images[args.index]
        inputs["data"] = args.data
        text = args.text if args.text is not None else data.captions[args.index]
    if text is None:
        raise ConfigError("heatmap needs --text")
    write_snapshot(args.out, "heatmap", args, model.cfg, inputs)
    prefix = Path(args.out) / "heatmap"
    grid = ev.similarity_heatmap(model, image, text, out_prefix=prefix)
    emit({"command": "heatmap", "text": text, "csv": str(prefix.with_suffix(".csv")),
          "ppm": str(prefix.with_suffix(".ppm")), "grid": grid})
    return 0


def cmd_gradcheck(args):
    from .audit import gradcheck_suite

    report = gradcheck_suite(args.seed or 0)
    if args.out:
        write_snapshot(args.out, "gradcheck", args)
        (Path(args.out) / "gradcheck.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                                                        encoding="utf-8")
    emit({"command": "gradcheck", **report})
    if not report["passed"]:
        raise NumericalFailure("gradient audit exceeded its tolerance")
    return 0


def cmd_inspect_ckpt(args):
    from .trainer import read_checkpoint

    ckpt = read_checkpoint(args.ckpt)
    arrays = {k: {"shape": list(v.shape), "dtype": v.dtype.str} for k, v in sorted(ckpt.arrays.items())}
    n_model = sum(int(v.size) for k, v in ckpt.arrays.items() if k.startswith("model/"))
    state = {k: v for k, v in ckpt.state.items() if k != "mask_rng"}
    emit({"command": "inspect-ckpt", "config": ckpt.config.to_dict(), "state": state,
          "model_parameters": n_model, "arrays": arrays, "hash": content_hash(args.ckpt)})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskclip", description="Desk-scale MaskCLIP pretraining and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")

    g = sub.add_parser("gen-data", help="write a synthetic image-caption corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--objects", type=int, help="fixed object count per scene")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="train a model")
    common(t)
    t.add_argument("--corpus", help="corpus directory (overrides the config)")
    t.add_argument("--objective", choices=("clip", "clip_pixel", "maskclip"))
    t.add_argument("--no-ema", action="store_true", help="teacher copies the student each step")
    t.add_argument("--mask-ratio", type=float)
    t.add_argument("--lambda", dest="lambda_dist", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-after-epoch", type=int, help="halt once this many epochs are complete")
    t.set_defaults(func=cmd_pretrain)

    for name, fn, extra in (("eval-zeroshot", cmd_eval_zeroshot, None), ("eval-seg", cmd_eval_seg, None),
                            ("eval-retrieval", cmd_eval_retrieval, None), ("probe", cmd_probe, "probe")):
        e = sub.add_parser(name)
        common(e)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--data", required=True)
        if extra == "probe":
            e.add_argument("--train-frac", type=float, default=0.5)
        e.set_defaults(func=fn)

    h = sub.add_parser("heatmap", help="patch-caption similarity grid as CSV + PPM")
    common(h)
    h.add_argument("--ckpt", required=True)
    h.add_argument("--image", help="PPM image")
    h.add_argument("--data", help="corpus directory (with --index)")
    h.add_argument("--index", type=int, default=0)
    h.add_argument("--text")
    h.set_defaults(func=cmd_heatmap)

    c = sub.add_parser("gradcheck", help="finite-difference audit of every primitive and the full loss")
    common(c, out_required=False)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect-ckpt", help="summarise a checkpoint")
    i.add_argument("ckpt")
    i.set_defaults(func=cmd_inspect_ckpt, overrides=[])
    return p


def _fail(code, exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code},
                                sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (NonFiniteError, FloatingPointError, NumericalFailure) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (OSError, ValueError, KeyError) as exc:
        from .trainer import CheckpointError

        if isinstance(exc, (OSError, CheckpointError)):
            return _fail(EXIT_IO, exc)
        if isinstance(exc, KeyError):
            return _fail(EXIT_IO, exc)
        return _fail(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
