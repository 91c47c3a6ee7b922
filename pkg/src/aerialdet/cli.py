"""Command-line entry point: ``aerialdet <command> [options]``.

Commands: synth, dataset, train, eval, detect, bench. Exit status is 0 on
success, 1 on a usage or configuration error and 2 on a data or file
format error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import classifiers, container, evalharness, scnn
from .config import RunConfig, describe_keys
from .elm import helm_train
from .errors import ConfigError, DimensionError, FormatError, StateError
from .imagecore import BoundingBox, frame_name, load_frames, save_frame
from .pipeline import process_video
from .scenes import generate_scene, person_scene_config, read_truth, write_truth

GREEN = (0, 255, 0)
RED = (255, 0, 0)
METHODS = ("scnn", "helm", "svm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# -- helpers -----------------------------------------------------------------

def effective_jobs(requested: int) -> int:
    """``--jobs`` capped by AERIALDET_THREADS when that is set."""
    jobs = max(1, requested)
    cap = os.environ.get("AERIALDET_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"AERIALDET_THREADS must be an integer, got {cap!r}") from exc
    return jobs


def _parse_sets(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def run_config(args) -> RunConfig:
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return RunConfig.load(args.config, overrides)


def _atomic_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _draw_rect(rgb: np.ndarray, box, color, thickness: int) -> None:
    h, w = rgb.shape[:2]
    b = BoundingBox(*box).clamp(w, h)
    if b is None:
        return
    t = min(thickness, b.w, b.h)
    x0, y0, x1, y1 = b.x, b.y, b.x + b.w, b.y + b.h
    rgb[y0:y0 + t, x0:x1] = color
    rgb[y1 - t:y1, x0:x1] = color
    rgb[y0:y1, x0:x0 + t] = color
    rgb[y0:y1, x1 - t:x1] = color


def render_annotations(frames, results, out_dir) -> Path:
    """Annotated RGB PNGs plus ``detections.jsonl`` in ``out_dir``.

    Candidates are 1-px green rectangles, humans 2-px red rectangles drawn
    over them. Frames without a result are copied unchanged (as RGB).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_frame = {r.frame_index: r for r in results}
    lines = []
    for i, frame in enumerate(frames):
        gray = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
        r = by_frame.get(i)
        if r is not None:
            for box in r.candidates:
                _draw_rect(rgb, box, GREEN, 1)
                lines.append({"frame": i, "class": "candidate", "box": list(map(int, box)), "score": None})
            for box, score in r.humans:
                _draw_rect(rgb, box, RED, 2)
                lines.append({"frame": i, "class": "human", "box": list(map(int, box)),
                              "score": float(score)})
        target = out / frame_name(i)
        tmp = target.with_name(target.name + ".tmp")
        Image.fromarray(rgb).save(tmp, format="PNG")
        os.replace(tmp, target)
    jsonl = out / "detections.jsonl"
    _atomic_text(jsonl, "".join(json.dumps(rec) + "\n" for rec in lines))
    return jsonl


# -- trainers ----------------------------------------------------------------

def make_trainer(method: str, cfg: RunConfig, features=None):
    """trainer(patches, labels, seed) -> classifier head."""
    if method == "helm":
        return lambda X, y, seed: classifiers.HelmHead(helm_train(X, y, cfg.helm(seed)))

    def fit_net(X, y, seed):
        return scnn.train_scnn(X, y, cfg.sgd(seed), arch=cfg.architecture())

    if method == "scnn":
        return lambda X, y, seed: classifiers.SoftmaxHead(fit_net(X, y, seed))
    if method == "svm" and features is None:
        def train_svm(X, y, seed):
            net = fit_net(X, y, seed)
            return classifiers.train_scnn_svm(net, X, y, cfg["svm.c"], cfg["svm.epochs"], seed)
        return train_svm
    if method == "svm":
        # "patches" are (N, 1) row indices into the external feature matrix
        def lookup(rows):
            return features[np.asarray(rows, dtype=np.intp)[:, 0]]

        def train_external(rows, y, seed):
            svm = classifiers.train_linear_svm(lookup(rows), classifiers.to_signed(y), cfg["svm.c"],
                                               cfg["svm.epochs"], seed)
            return classifiers.ExternalSvmHead(svm, lookup)
        return train_external
    raise ConfigError(f"unknown method {method!r}")


def _training_inputs(args, X):
    """Patches, or row indices when an external feature file stands in for them."""
    if getattr(args, "features", None) is None:
        return X, None
    fm = classifiers.load_external_features(args.features, expected_rows=X.shape[0])
    return np.arange(X.shape[0], dtype=np.intp)[:, None], fm.data.astype(np.float64)


def _methods(text: str) -> list:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"--method must be a comma list drawn from {METHODS}, got {text!r}")
    return methods


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene_seed = cfg.seed_for("scene")
    for pid in range(1, cfg["scene.persons"] + 1):
        sc_cfg = person_scene_config(pid, scene_seed, cfg["scene.frames"], cfg["scene.width"],
                                     cfg["scene.height"], cfg["scene.noise"])
        scene = generate_scene(sc_cfg)
        d = out / f"person_{pid:02d}"
        (d / "frames").mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(scene.frames):
            save_frame(frame, d / "frames" / frame_name(i))
        write_truth(scene.truth, d / "truth.jsonl")
        _atomic_text(d / "meta.json", json.dumps({"person_id": pid}) + "\n")
    print(f"wrote {cfg['scene.persons']} clips to {out}")
    return 0


def load_videos(root) -> list:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file()) if root.is_dir() else []
    if not dirs:
        raise FormatError(f"no clips (directories with meta.json) under {root}")
    videos = []
    for d in dirs:
        try:
            meta = json.loads((d / "meta.json").read_text())
            pid = int(meta["person_id"])
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad meta.json in {d}: {exc}") from exc
        truth = read_truth(d / "truth.jsonl") if (d / "truth.jsonl").is_file() else []
        videos.append(evalharness.LabeledVideo(load_frames(d / "frames"), truth, pid, meta.get("activity")))
    return videos


def cmd_dataset(args, cfg: RunConfig) -> int:
    videos = load_videos(args.videos)
    samples = evalharness.build_patch_dataset(videos, cfg.detector(), cfg["dataset.stride"])
    if not samples:
        raise FormatError("no candidate patches found; nothing to write")
    evalharness.save_dataset(samples, args.out)
    pos = sum(s.label for s in samples)
    print(f"samples={len(samples)} positive={pos} negative={len(samples) - pos}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    X, y, _ = evalharness.load_dataset(args.data)
    inputs, feats = _training_inputs(args, X)
    head = make_trainer(args.method, cfg, feats)(inputs, y, cfg.seed_for(f"train.{args.method}"))
    if feats is not None:
        head = classifiers.ExternalSvmHead(head.svm, patch_size=None)
    container.save_model(head, args.out)
    print(f"saved {head.kind} model to {args.out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.cv and args.method is None:
        raise UsageError("eval --cv needs --method")
    if not args.cv and args.model is None:
        raise UsageError("eval needs --model (or --cv with --method)")
    X, y, pids = evalharness.load_dataset(args.data)
    if args.cv:
        inputs, feats = _training_inputs(args, X)
        reports = []
        for method in _methods(args.method):
            trainer = make_trainer(method, cfg, feats)
            reports.append(evalharness.cross_validate(
                inputs, y, pids, trainer, method=method, seed=cfg["seed"], jobs=effective_jobs(args.jobs),
                seed_for=lambda s, k, m=method: cfg.seed_for(f"cv.{m}.{k}")))
        for rep in reports:
            for r in rep.results:
                print(f"{rep.method} split {r.split} {evalharness.format_split(evalharness.leave_four_out_splits()[r.split - 1])}"
                      f" accuracy {evalharness.format_accuracy(r.accuracy)}")
            print(f"{rep.method} mean accuracy {evalharness.format_accuracy(rep.mean_accuracy)}")
        if args.out:
            evalharness.write_metrics_csv(reports, args.out, include_timing=args.timing)
        return 0
    head = container.load_model(args.model)
    if args.persons:
        keep = np.isin(pids, [int(p) for p in args.persons.split(",")])
        X, y = X[keep], y[keep]
    if head.kind == "external_svm":
        if args.features is None:
            raise UsageError("an external_svm model needs --features")
        fm = classifiers.load_external_features(args.features, expected_rows=len(pids))
        data = fm.data if not args.persons else fm.data[keep]
        cm = evalharness.ConfusionMatrix.from_labels(y, head.classify_features(data)[0])
        acc = cm.accuracy
    else:
        acc, cm = evalharness.evaluate(head, (X, y))
    print(f"accuracy {evalharness.format_accuracy(acc)} tp={cm.tp} fp={cm.fp} tn={cm.tn} fn={cm.fn}")
    if args.out:
        rep = evalharness.CvReport(head.kind, [evalharness.SplitResult(
            0, frozenset(), acc, cm, 0, cm.total, 0.0, 0.0)])
        evalharness.write_metrics_csv(rep, args.out, include_timing=False)
    return 0


def cmd_detect(args, cfg: RunConfig) -> int:
    frames = load_frames(args.frames)
    head = None
    kind = "helm"
    if args.model:
        head = container.load_model(args.model)
        kind = head.kind
        if kind == "external_svm":
            raise UsageError("external_svm models classify feature files, not frames")
    det = cfg.detector(kind)
    if head is not None and head.patch_size != det.patch_size:
        det = type(det)(det.hs, det.mask, det.se_radius, det.min_area, head.patch_size, kind)
    results = process_video(frames, det, head, jobs=effective_jobs(args.jobs))
    jsonl = render_annotations(frames, results, args.out)
    n_c = sum(len(r.candidates) for r in results)
    n_h = sum(len(r.humans) for r in results)
    print(f"frames={len(frames)} candidates={n_c} humans={n_h} -> {jsonl}")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    X, y, _ = evalharness.load_dataset(args.data)
    trainers = {m: make_trainer(m, cfg) for m in _methods(args.method)}
    rows = evalharness.benchmark_timing(trainers, X, y, n_predictions=cfg["bench.predictions"],
                                        seed=cfg.seed_for("bench"))
    for r in rows:
        print(f"{r.method}: train {r.train_s:.3f} s, test {r.test_s_per_sample * 1e3:.3f} ms/sample")
    if args.out:
        evalharness.write_timing_csv(rows, args.out)
    return 0


def cmd_config(args, cfg: RunConfig) -> int:
    if args.defaults:
        print(describe_keys())
    else:
        for key, value in cfg.as_dict().items():
            print(f"{key}={value}  # {cfg.source(key)}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="master seed (same as --set seed=S)")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers (capped by AERIALDET_THREADS)")

    p = _Parser(prog="aerialdet", description="Moving-human detection in aerial video.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="render synthetic person clips with ground truth")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("dataset", parents=[common], help="build a labelled patch dataset from clips")
    s.add_argument("--videos", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", parents=[common], help="train a classifier and save a model container")
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--features", help="external feature file (svm only), one row per dataset sample")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a model, or cross-validate a method")
    s.add_argument("--data", required=True)
    s.add_argument("--model")
    s.add_argument("--cv", action="store_true", help="run the ten leave-four-person-out splits")
    s.add_argument("--method", help="method(s) for --cv, comma separated")
    s.add_argument("--features", help="external feature file for svm")
    s.add_argument("--persons", help="comma list of person ids to test on (single-model eval)")
    s.add_argument("--timing", action="store_true", help="fill the timing columns of the CSV")
    s.add_argument("--out", help="metrics CSV path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("detect", parents=[common], help="annotate a frame directory")
    s.add_argument("--frames", required=True)
    s.add_argument("--model")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("bench", parents=[common], help="time training and single-patch prediction")
    s.add_argument("--data", required=True)
    s.add_argument("--method", default="helm,scnn")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("config", parents=[common], help="show resolved settings")
    s.add_argument("--defaults", action="store_true", help="list every key with its default")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        return args.func(args, run_config(args))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (FormatError, DimensionError, StateError, OSError) as exc:
        print(f"aerialdet: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
