"""Command-line surface.

Machine output is JSON on stdout (one object, or one object per line for
streams); diagnostics go to stderr. Exit codes: 0 success, 1 domain error,
2 usage error. SIGNFLOW_SEED overrides the default --seed; an optional
--config JSON file supplies flag defaults (explicit flags win).
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import Model, NetSpec, TrainConfig, build, evaluate, parameter_count, train
from .dataset import (ManifestEntry, SynthSpec, load_clip_dataset, load_manifest,
                      make_isolated_clips, read_clip, synth_temporal)
from .errors import SignflowError, UsageError
from .gloss import load_lexicon, load_rules, reorder, segment
from .sampler import SampleSpec, MODE_EVAL_CENTER, MODE_TRAIN_RANDOM
from .tensor import (Tensor, conv2d, conv3d, global_avg_pool, grad_check, matmul, relu,
                     sigmoid, softmax_cross_entropy)
from .tsm import UNIDIRECTIONAL
from .videoplan import (ClipIndex, RecognizeConfig, TransitionPolicy, concat_frames,
                        plan, recognize)

DEMO_DIR = Path(__file__).parent / "demo"


def _emit(obj: dict, args) -> None:
    if not args.no_timestamp:
        obj = {**obj, "timestamp": datetime.now(timezone.utc).isoformat()}
    indent = 2 if args.pretty else None
    sys.stdout.write(json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=indent) + "\n")


def _emit_line(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")
    sys.stdout.flush()


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: {p} does not exist")
    return p


def _default_seed() -> int:
    env = os.environ.get("SIGNFLOW_SEED")
    return int(env) if env else 0


def _netspec_from_args(args, num_classes: int) -> NetSpec:
    preset = getattr(args, "preset", "micro")
    kw = {}
    if getattr(args, "fold", None) is not None:
        kw["fold_fraction"] = args.fold
    if getattr(args, "direction", None) is not None:
        kw["direction"] = args.direction
    if getattr(args, "t", None) is not None:
        kw["t"] = args.t
    if preset == "tiny":
        return NetSpec.tiny(num_classes, temporal=args.temporal, **kw)
    return NetSpec.micro(num_classes, temporal=args.temporal, **kw)


def _load_model(args) -> Model:
    weights = _require_file(args.weights, "--weights")
    spec_path = Path(args.netspec) if args.netspec else weights.with_name("netspec.json")
    if not spec_path.exists():
        raise UsageError(f"--netspec: {spec_path} does not exist")
    return Model.load(weights, spec_path)


def _frames_entry(frames_dir: Path) -> ManifestEntry:
    count = len(list(frames_dir.glob("frame_*.p?m")))
    if count == 0:
        raise UsageError(f"--frames: no frame_*.pgm/.ppm files in {frames_dir}")
    return ManifestEntry(frames_dir.name, str(frames_dir), count, 0, "test")


# -- subcommands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.isolated:
        lex = load_lexicon(_require_file(args.lexicon, "--lexicon"))
        glosses = {e.gloss_id: i for i, e in
                   enumerate(sorted(lex.entries.values(), key=lambda e: e.gloss_id))}
        manifest = make_isolated_clips(glosses, out, num_frames=args.t,
                                       frame_size=(args.size, args.size), seed=args.seed)
    else:
        per_split = {"train": args.train_per_class, "val": args.val_per_class,
                     "test": args.test_per_class}
        spec = SynthSpec(num_classes=args.classes, t=args.t,
                         frame_size=(args.size, args.size),
                         clips_per_class=per_split, noise=args.noise, seed=args.seed)
        manifest = synth_temporal(spec, out)
    entries, _ = load_manifest(manifest)
    _emit({"manifest": str(manifest), "labels": str(manifest.parent / "labels.json"),
           "entries": len(entries)}, args)
    return 0


def cmd_train(args) -> int:
    manifest = _require_file(args.manifest, "--manifest")
    entries, label_map = load_manifest(manifest)
    num_classes = args.classes or (len(label_map) if label_map else
                                   max(e.label for e in entries) + 1)
    spec = _netspec_from_args(args, num_classes)
    mode = MODE_TRAIN_RANDOM if args.sample_mode == "random" else MODE_EVAL_CENTER
    sample = SampleSpec(num_segments=spec.t, mode=mode, seed=args.seed)
    train_ds = load_clip_dataset(manifest, "train", sample, size=spec.frame_size)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      momentum=args.momentum, weight_decay=args.weight_decay,
                      seed=args.seed, precision=args.precision)
    model = build(spec, seed=args.seed, dtype=cfg.dtype)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = train(model, train_ds, cfg, on_epoch=_emit_line)
    weights_path = out / "model.sgnf"
    model.save(weights_path, out / "netspec.json")
    summary = {"weights": str(weights_path), "netspec": str(out / "netspec.json"),
               "epochs": len(history), "parameters": parameter_count(model),
               "final": history[-1] if history else None}
    _emit(summary, args)
    return 0


def cmd_eval(args) -> int:
    manifest = _require_file(args.manifest, "--manifest")
    model = _load_model(args)
    sample = SampleSpec(num_segments=model.spec.t, mode=MODE_EVAL_CENTER)
    dataset = load_clip_dataset(manifest, args.split, sample, size=model.spec.frame_size)
    metrics = evaluate(model, dataset)
    _emit({"split": args.split, **metrics.to_dict()}, args)
    return 0


def cmd_recognize(args) -> int:
    model = _load_model(args)
    lex = load_lexicon(_require_file(args.lexicon, "--lexicon"))
    rules = load_rules(_require_file(args.rules, "--rules"), known_tags=lex.known_tags) \
        if args.rules else []
    if args.frames:
        entry = _frames_entry(_require_file(args.frames, "--frames"))
        base = Path(".")
        label_map = None
        if args.labels:
            with open(_require_file(args.labels, "--labels"), encoding="utf-8") as fh:
                label_map = json.load(fh)
    else:
        manifest = _require_file(args.manifest, "--manifest")
        entries, label_map = load_manifest(manifest)
        by_id = {e.video_id: e for e in entries}
        if args.video_id not in by_id:
            raise UsageError(f"--video-id: {args.video_id!r} not in {manifest}")
        entry = by_id[args.video_id]
        base = manifest.parent
        if args.labels:
            with open(_require_file(args.labels, "--labels"), encoding="utf-8") as fh:
                label_map = json.load(fh)
    cfg = RecognizeConfig(window=args.window, stride=args.stride)
    sample = SampleSpec(num_segments=model.spec.t, mode=MODE_EVAL_CENTER)
    result = recognize(entry, model, lex, rules, sample, base=base,
                       label_map=label_map, cfg=cfg, size=model.spec.frame_size)
    _emit(result, args)
    return 0


def cmd_stream(args) -> int:
    model = _load_model(args)
    frames_dir = _require_file(args.frames, "--frames")
    entry = _frames_entry(frames_dir)
    stream = model.open_stream(stream_id=frames_dir.name)
    for i in range(entry.num_frames):
        clip = read_clip(entry, [i], base=".", size=model.spec.frame_size)
        step = stream.step(clip[0][None].astype(model.dtype))
        _emit_line({"frame": i, "prediction": step["prediction"],
                    "rolling_logits": [round(float(v), 6) for v in step["rolling_logits"][0]]})
    return 0


def cmd_translate(args) -> int:
    lex = load_lexicon(_require_file(args.lexicon, "--lexicon"))
    rules = load_rules(_require_file(args.rules, "--rules"), known_tags=lex.known_tags) \
        if args.rules else []
    tokens = segment(args.text, lex)
    seq = reorder(tokens, rules)
    result: dict = {"text": args.text, "segmented": [t.surface for t in tokens],
                    **seq.to_dict()}
    if args.clips:
        index = ClipIndex(_require_file(args.clips, "--clips"), fps=args.fps)
        policy = TransitionPolicy.parse(args.policy)
        manifest = plan(seq, lex, index, policy=policy, fallback=args.fallback)
        for record in manifest.warnings:  # diagnostics stream, one JSON line each
            print(json.dumps(record, ensure_ascii=False, sort_keys=True), file=sys.stderr)
        result["manifest"] = manifest.to_dict()
        if args.materialize:
            if not args.out:
                raise UsageError("--materialize requires --out")
            out_dir = Path(args.out)
            entry = concat_frames(manifest, index, out_dir / "frames", video_id=out_dir.name)
            result["frames_dir"] = str(out_dir / "frames") if entry else None
            result["materialized_frames"] = entry.num_frames if entry else 0
    elif args.materialize:
        raise UsageError("--materialize requires --clips")
    _emit(result, args)
    return 0


def _median_ms(fn, reps: int, warmup: int = 3) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def cmd_bench(args) -> int:
    manifest = _require_file(args.manifest, "--manifest")
    entries, label_map = load_manifest(manifest)
    num_classes = len(label_map) if label_map else max(e.label for e in entries) + 1
    sample = SampleSpec(num_segments=args.t, mode=MODE_EVAL_CENTER)
    rows = []
    for variant in args.variants.split(","):
        variant = variant.strip()
        spec = _netspec_from_args(argparse.Namespace(
            preset=args.preset, temporal=variant, t=args.t,
            fold=args.fold, direction=UNIDIRECTIONAL if variant == "shift" else None),
            num_classes)
        model = build(spec, seed=args.seed)
        train_ds = load_clip_dataset(manifest, "train", sample, size=spec.frame_size)
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                          seed=args.seed)
        if args.epochs:
            train(model, train_ds, cfg)
        eval_split = args.split if any(e.split == args.split for e in entries) else "train"
        eval_ds = load_clip_dataset(manifest, eval_split, sample, size=spec.frame_size)
        metrics = evaluate(model, eval_ds)

        clip = np.asarray(eval_ds[0][0], dtype=model.dtype)[None]
        ms_clip = _median_ms(lambda: model.forward(clip), args.reps)
        if variant in ("shift", "none"):
            frame = clip[:, 0]
            stream = model.open_stream()
            ms_frame = _median_ms(lambda: stream.step(frame), args.reps)
            ratio = ms_frame / ms_clip
        else:
            ms_frame = None
            ratio = None
        rows.append({"variant": variant, **metrics.to_dict(),
                     "ms_per_clip": round(ms_clip, 4),
                     "ms_per_frame_online": round(ms_frame, 4) if ms_frame is not None else None,
                     "online_offline_ratio": round(ratio, 4) if ratio is not None else None})
    _emit({"t": args.t, "reps": args.reps, "rows": rows}, args)
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    checks = []

    def record(op, err, tol=1e-4):
        checks.append({"op": op, "max_rel_err": float(err), "tolerance": tol,
                       "pass": bool(err <= tol)})

    x = rng.uniform(-1, 1, (3, 4))
    w = rng.uniform(-1, 1, (4, 2))
    record("matmul", grad_check(lambda t: matmul(t, Tensor(w)).sum(), x))
    xc = rng.uniform(-1, 1, (2, 3, 6, 6))
    wc = rng.uniform(-1, 1, (4, 3, 3, 3))
    record("conv2d", grad_check(lambda t: conv2d(t, Tensor(wc), stride=2, pad=1).sum(), xc))
    x3 = rng.uniform(-1, 1, (1, 1, 4, 5, 5))
    w3 = rng.uniform(-1, 1, (1, 1, 3, 3, 3))
    record("conv3d", grad_check(lambda t: conv3d(t, Tensor(w3), pad=1).sum(), x3))
    record("global_avg_pool", grad_check(lambda t: global_avg_pool(t).sum(), xc))
    # keep relu inputs away from the kink
    xr = rng.uniform(0.1, 1, (3, 5)) * rng.choice([-1.0, 1.0], size=(3, 5))
    record("relu", grad_check(lambda t: relu(t).sum(), xr))
    record("sigmoid", grad_check(lambda t: sigmoid(t).sum(), x))
    logits = rng.uniform(-1, 1, (4, 5))
    labels = rng.integers(0, 5, size=4)
    record("softmax_cross_entropy",
           grad_check(lambda t: softmax_cross_entropy(t, labels), logits))

    from .backbone import StageSpec
    spec = NetSpec(num_classes=3, t=4, in_channels=2, frame_size=(8, 8), stem_channels=8,
                   stem_stride=1, stages=(StageSpec(1, 8),), temporal="shift")
    model = build(spec, seed=args.seed, dtype=np.float64)
    clip = rng.uniform(0.05, 1, (1, 4, 2, 8, 8))
    labels_net = np.array([1])

    def net_loss(t: Tensor) -> Tensor:
        return softmax_cross_entropy(model.forward(t), labels_net)

    record("backbone_input", grad_check(net_loss, clip))

    ok = all(c["pass"] for c in checks)
    _emit({"checks": checks, "all_pass": ok}, args)
    return 0 if ok else 1


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signflow",
                                     description="Two-way sign language translation engine")
    parser.add_argument("--version", action="version", version=f"signflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    seed_default = _default_seed()

    def common(p):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--config", help="JSON file of flag defaults (flags win)")
        p.add_argument("--no-timestamp", action="store_true",
                       help="omit the timestamp field (byte-stable output)")
        p.add_argument("--pretty", action="store_true", help="indent JSON output")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--val-per-class", type=int, default=0)
    p.add_argument("--test-per-class", type=int, default=13)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--isolated", action="store_true",
                   help="generate one clip per lexicon gloss instead")
    p.add_argument("--lexicon", help="lexicon TSV (with --isolated)")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["micro", "tiny"], default="micro")
    p.add_argument("--temporal", choices=["shift", "action", "none"], default="shift")
    p.add_argument("--direction", choices=["bidirectional", "unidirectional"])
    p.add_argument("--fold", type=float, help="shift fold fraction (default 1/8)")
    p.add_argument("--classes", type=int)
    p.add_argument("--t", type=int, help="segments per clip (default: preset value)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--precision", choices=["float32", "float64"], default="float32")
    p.add_argument("--sample-mode", choices=["random", "center"], default="center")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate weights on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--netspec", help="defaults to netspec.json beside the weights")
    p.add_argument("--split", default="test")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("recognize", help="recognize a sign video to text")
    p.add_argument("--weights", required=True)
    p.add_argument("--netspec")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--rules")
    p.add_argument("--labels", help="labels.json gloss->class map")
    p.add_argument("--frames", help="frame directory")
    p.add_argument("--manifest", help="dataset manifest (with --video-id)")
    p.add_argument("--video-id")
    p.add_argument("--window", type=int, help="sliding window length in frames")
    p.add_argument("--stride", type=int)
    common(p)
    p.set_defaults(fn=cmd_recognize)

    p = sub.add_parser("stream", help="per-frame rolling prediction via the online shift")
    p.add_argument("--weights", required=True)
    p.add_argument("--netspec")
    p.add_argument("--frames", required=True)
    common(p)
    p.set_defaults(fn=cmd_stream)

    p = sub.add_parser("translate", help="text -> gloss order -> clip plan (-> frames)")
    p.add_argument("--text", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--rules")
    p.add_argument("--clips", help="isolated-word clip manifest")
    p.add_argument("--policy", default="hard-cut",
                   help="hard-cut or hold-last-frame:N")
    p.add_argument("--fallback", choices=["skip", "error"], default="skip")
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--out", help="output directory (with --materialize)")
    p.add_argument("--materialize", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("bench", help="latency/accuracy comparison across temporal variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variants", default="shift,action,none")
    p.add_argument("--preset", choices=["micro", "tiny"], default="micro")
    p.add_argument("--fold", type=float)
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--epochs", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--split", default="test")
    p.add_argument("--reps", type=int, default=30)
    common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every op")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def _apply_config(args: argparse.Namespace, argv: list[str]) -> argparse.Namespace:
    """Fill flags from --config JSON where the flag was not given explicitly."""
    if not getattr(args, "config", None):
        return args
    with open(args.config, encoding="utf-8") as fh:
        defaults = json.load(fh)
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in defaults.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and attr not in given:
            setattr(args, attr, value)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(args, argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SignflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
