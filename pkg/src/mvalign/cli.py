"""Command-line entry point: synth, train, fit, detect, track, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time

import numpy as np

from .config import ConfigKeyError, load_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mvalign")


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def version_string():
    """``git describe`` of the source tree when available, else the installed version."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here, capture_output=True,
                             text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


# --------------------------------------------------------------------------
# config -> objects

def _schema(cfg):
    from .landmarks import build_union_schema

    return build_union_schema(cfg.union, dissimilated=cfg.u86_dissimilated if cfg.union == "U86" else None)


def _cascade_config(cfg):
    from .pipeline import CascadeConfig

    return CascadeConfig(thresholds=cfg.thresholds, pyramid_factor=cfg.pyramid_factor, min_face=cfg.min_face,
                         nms=cfg.nms, crop_size=cfg.input_size, classifier_size=cfg.classifier_size,
                         refine=cfg.decode_refine, template=cfg.template, view_margin=cfg.view_margin)


def _tracker_config(cfg):
    from .pipeline import TrackerConfig

    return TrackerConfig(margin=cfg.track_margin, failure_threshold=cfg.failure_threshold, smooth=cfg.smooth,
                         process_var=cfg.process_var, measurement_var=cfg.measurement_var)


def _check_finite(history, what):
    last = history[-1][0] if isinstance(history[-1], tuple) else history[-1]
    if not np.isfinite(last):
        raise NumericFailure(f"{what}: loss became non-finite")


def _load_models(model_dir, need_mhm=True):
    from .networks import load_checkpoint
    from .pipeline import Models

    stages = []
    for k in (1, 2, 3):
        path = os.path.join(model_dir, f"stage{k}.mvaw")
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} not found (train --model cascade writes it)")
        stages.append(load_checkpoint(path)[0])
    mhm = classifier = schema = None
    mhm_path = os.path.join(model_dir, "mhm.mvaw")
    if os.path.exists(mhm_path):
        mhm, side = load_checkpoint(mhm_path)
        from .landmarks import build_union_schema

        schema = build_union_schema(side.get("schema", "U68"), dissimilated=side.get("dissimilated"))
        patch_path = os.path.join(model_dir, "patch.mvaw")
        if os.path.exists(patch_path):
            classifier = load_checkpoint(patch_path)[0]
    elif need_mhm:
        raise FileNotFoundError(f"{mhm_path} not found")
    return Models(stages, mhm, classifier, schema)


def _face_json(face):
    doc = {"box": face.box.to_list(), "score": face.box.score, "five": np.asarray(face.five).tolist(),
           "view": face.view, "probability": face.probability}
    if face.landmarks is not None:
        doc.update(face.landmarks.to_json())
    return doc


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args, cfg, out):
    from .landmarks import sequence_samples, synthesize_dataset, write_dataset, write_scenes
    from .landmarks.synthetic import synthesize_scene, synthesize_sequence

    if args.kind == "faces":
        views = args.views.split(",") if args.views else None
        samples = synthesize_dataset(args.n, cfg.seed, image_size=cfg.image_size, views=views)
        path = write_dataset(out, samples)
    elif args.kind == "scenes":
        scenes = [synthesize_scene([cfg.seed, i]) for i in range(args.n)]
        path = write_scenes(out, scenes)
    else:
        occ = (args.occlude_at, args.occlude_len) if args.occlude_at is not None else None
        seq = synthesize_sequence(args.n, cfg.seed, view=args.views or "frontal", occlusion=occ)
        path = write_dataset(out, sequence_samples(seq))
    print(f"wrote {args.n} {args.kind} -> {path}")
    return {"manifest": path}


def cmd_train(args, cfg, out):
    from .networks import HourglassConfig, MultiViewHourglass, PatchClassifier, TwoStackHourglass, save_checkpoint
    from .training import make_patch_data, prepare_heatmap_data, train_cascade, train_heatmap_model, \
        train_patch_classifier

    steps = args.steps if args.steps is not None else cfg.steps
    if args.model == "mhm":
        from .landmarks import load_dataset

        samples = load_dataset(args.data)
        schema = _schema(cfg)
        data = prepare_heatmap_data(samples, schema, cfg.input_size, cfg.sigma, cfg.template, cfg.heatmap_copies,
                                    cfg.five_jitter, cfg.seed)
        hcfg = HourglassConfig(cfg.scales, cfg.channels, cfg.input_size, schema.size)
        model = (TwoStackHourglass if cfg.two_stack else MultiViewHourglass)(hcfg, seed=cfg.seed)
        hist = train_heatmap_model(model, data, steps, cfg.batch_size, cfg.lr, cfg.optimizer, cfg.momentum,
                                   cfg.weight_decay, cfg.seed, log_every=max(steps // 10, 1), schedule=cfg.lr_schedule)
        _check_finite(hist, "mhm")
        path = os.path.join(out, "mhm.mvaw")
        save_checkpoint(path, model, schema=schema.kind,
                        dissimilated=list(cfg.u86_dissimilated) if schema.kind == "U86" else None)
        losses = [h[0] for h in hist]
    elif args.model == "cascade":
        from .landmarks import load_scenes

        scenes = load_scenes(args.data)
        steps = args.steps if args.steps is not None else cfg.cascade_steps
        nets, hists = train_cascade(scenes, steps, _cascade_config(cfg), cfg.seed, lam1=cfg.lambda_box,
                                    lam2=cfg.lambda_landmark)
        for k, (net, h) in enumerate(zip(nets, hists), start=1):
            _check_finite(h, f"stage {k}")
            save_checkpoint(os.path.join(out, f"stage{k}.mvaw"), net)
        path = os.path.join(out, "stage3.mvaw")
        losses = hists[-1]
    else:
        from .landmarks import load_dataset

        samples = load_dataset(args.data)
        schema = _schema(cfg)
        steps = args.steps if args.steps is not None else cfg.classifier_steps
        rng = np.random.default_rng(cfg.seed)
        patches, labels = make_patch_data(samples, schema, rng, cfg.classifier_size, template=cfg.template)
        model = PatchClassifier(n_points=schema.size, seed=cfg.seed)
        losses = train_patch_classifier(model, patches, labels, steps, seed=cfg.seed)
        _check_finite(losses, "patch classifier")
        path = os.path.join(out, "patch.mvaw")
        save_checkpoint(path, model, schema=schema.kind)
    with open(os.path.join(out, f"loss_{args.model}.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows(enumerate(losses))
    print(f"{args.model}: {len(losses)} steps, loss {losses[0]:.6g} -> {losses[-1]:.6g}; saved {path}")
    return {"checkpoint": path, "initial_loss": losses[0], "final_loss": losses[-1]}


def cmd_fit(args, cfg, out):
    from .alignment import fit
    from .landmarks import build_union_schema, load_dataset
    from .networks import load_checkpoint

    model, side = load_checkpoint(args.model)
    schema = build_union_schema(side.get("schema", "U68"), dissimilated=side.get("dissimilated"))
    samples = load_dataset(args.data)
    path = os.path.join(out, "predictions.jsonl")
    with open(path, "w") as fh:
        for s in samples:
            r = fit(s.image, s.box, s.five, model, schema, refine=cfg.decode_refine, template=cfg.template,
                    margin=cfg.view_margin)
            doc = {"image": s.meta.get("image"), "view": r.view, "confidence": r.confidence.tolist()}
            doc.update(r.landmarks.to_json())
            fh.write(json.dumps(doc) + "\n")
    print(f"fitted {len(samples)} faces -> {path}")
    return {"predictions": path}


def _image_list(path):
    from .landmarks.dataset import _read_image

    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith((".npy", ".png", ".jpg")))
        return [(n, _read_image(os.path.join(path, n))) for n in names]
    return [(os.path.basename(path), _read_image(path))]


def cmd_detect(args, cfg, out):
    from .pipeline import detect

    models = _load_models(args.models, need_mhm=False)
    ccfg = _cascade_config(cfg)
    path = os.path.join(out, "detections.jsonl")
    with open(path, "w") as fh:
        for name, img in _image_list(args.images):
            d = detect(img, ccfg, models)
            fh.write(json.dumps({"image": name, "stage_counts": d.stage_counts,
                                 "faces": [_face_json(f) for f in d.faces]}) + "\n")
            print(f"{name}: {len(d.faces)} faces, stage counts {d.stage_counts}")
    return {"detections": path}


def cmd_track(args, cfg, out):
    from .landmarks import read_frames
    from .pipeline import track

    models = _load_models(args.models)
    names, frames = read_frames(args.frames)
    results = track(frames, models, _cascade_config(cfg), _tracker_config(cfg))
    path = os.path.join(out, "track.jsonl")
    with open(path, "w") as fh:
        for name, r in zip(names, results):
            doc = r.to_json()
            doc["image"] = name
            fh.write(json.dumps(doc) + "\n")
    lost = sum(r.status == "lost" for r in results)
    print(f"tracked {len(results)} frames, {lost} lost -> {path}")
    return {"track": path, "lost": lost}


def _read_predictions(path):
    from .geometry import LandmarkSet
    from .landmarks import load_dataset

    if os.path.isdir(path):
        return [s.landmarks for s in load_dataset(path)]
    preds = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.strip():
                try:
                    preds.append(LandmarkSet.from_json(json.loads(raw)))
                except (ValueError, KeyError, TypeError) as exc:
                    from .landmarks import DatasetError

                    raise DatasetError([f"{path} line {lineno}: {exc}"]) from exc
    return preds


def cmd_eval(args, cfg, out):
    from .landmarks import DatasetError, load_dataset
    from .metrics import ced_auc_fr, nme

    gts = load_dataset(args.gt)
    preds = _read_predictions(args.pred)
    if len(preds) != len(gts):
        raise DatasetError([f"{len(preds)} predictions for {len(gts)} ground-truth samples"])
    errors = []
    for p, g in zip(preds, gts):
        # a wrong view gives a different schema; that counts as a failure
        errors.append(nme(p, g.landmarks, cfg.normalizer, g.box) if p.schema == g.landmarks.schema else np.inf)
    errors = np.array(errors)
    curve, auc, fr = ced_auc_fr(errors, cfg.auc_threshold)
    finite = errors[np.isfinite(errors)]
    report = {"normalizer": cfg.normalizer, "count": len(errors), "nme_mean": float(finite.mean()) if len(finite) else None,
              "nme_median": float(np.median(finite)) if len(finite) else None, "view_errors": int((~np.isfinite(errors)).sum()),
              "auc": auc, "failure_rate": fr, "threshold": cfg.auc_threshold}
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    with open(os.path.join(out, "ced.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "ced"])
        w.writerows(zip(curve.thresholds.tolist(), curve.fractions.tolist()))
    print(f"{'normalizer':<14}{cfg.normalizer}")
    print(f"{'images':<14}{len(errors)}")
    print(f"{'NME mean':<14}{100 * report['nme_mean']:.4f}%" if report["nme_mean"] is not None else "NME mean      n/a")
    print(f"{'AUC@' + format(cfg.auc_threshold, 'g'):<14}{auc:.4f}")
    print(f"{'FR@' + format(cfg.auc_threshold, 'g'):<14}{100 * fr:.2f}%")
    return report


def cmd_gradcheck(args, cfg, out):
    from .checks import run_suite

    t0 = time.perf_counter()
    results = run_suite(seed=cfg.seed, samples=args.samples)
    rows = [{"check": r.name, "max_rel_error": r.max_error, "seconds": r.seconds, "passed": r.passed}
            for r in results]
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['check']:<28} {r['max_rel_error']:.2e}  {r['seconds']:.2f}s")
    total = time.perf_counter() - t0
    print(f"{sum(r['passed'] for r in rows)}/{len(rows)} passed in {total:.1f}s")
    with open(os.path.join(out, "gradcheck.json"), "w") as fh:
        json.dump(rows, fh, indent=1)
    if not all(r["passed"] for r in rows):
        raise NumericFailure("gradient check failed")
    return {"checks": len(rows), "seconds": total}


# --------------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="mvalign-out", help="output directory")
    p = _Parser(prog="mvalign", description="Multi-view face alignment: synthetic data, training and evaluation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--kind", choices=("faces", "scenes", "sequence"), default="faces")
    s.add_argument("--n", type=int, default=8, help="samples, scenes or frames")
    s.add_argument("--views", help="comma-separated view cycle for faces; the view of a sequence")
    s.add_argument("--occlude-at", type=int, help="sequence frame where a full occlusion starts")
    s.add_argument("--occlude-len", type=int, default=5)

    s = sub.add_parser("train", parents=[common], help="train the hourglass, the cascade or the patch classifier")
    s.add_argument("--model", choices=("mhm", "cascade", "patch"), default="mhm")
    s.add_argument("--data", required=True, help="dataset directory (scenes directory for the cascade)")
    s.add_argument("--steps", type=int, help="overrides the configured step count")

    s = sub.add_parser("fit", parents=[common], help="fit landmarks to the faces of a dataset")
    s.add_argument("--model", required=True, help="hourglass checkpoint")
    s.add_argument("--data", required=True)

    s = sub.add_parser("detect", parents=[common], help="detect and align faces in images")
    s.add_argument("--models", required=True, help="directory with stage1-3, mhm and patch checkpoints")
    s.add_argument("--images", required=True, help="image file or directory")

    s = sub.add_parser("track", parents=[common], help="track a face through a frame directory")
    s.add_argument("--models", required=True)
    s.add_argument("--frames", required=True)

    s = sub.add_parser("eval", parents=[common], help="NME / CED / AUC / failure-rate report")
    s.add_argument("--pred", required=True, help="predictions JSON-lines or a dataset directory")
    s.add_argument("--gt", required=True, help="ground-truth dataset directory")

    s = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference gradient suite")
    s.add_argument("--samples", type=int, default=4, help="entries checked per network tensor")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "fit": cmd_fit, "detect": cmd_detect, "track": cmd_track,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None):
    from .geometry import DegenerateError
    from .landmarks import DatasetError, SchemaError
    from .metrics import MetricError

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
    except UsageError as exc:
        print(f"mvalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigKeyError, ValueError) as exc:
        print(f"mvalign: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"mvalign: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        cfg["seed"] = args.seed
    os.makedirs(args.out, exist_ok=True)
    manifest = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv), "seed": cfg.seed,
                "version": version_string(), "config": cfg.to_text(), "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    code = EXIT_OK
    try:
        manifest["result"] = COMMANDS[args.command](args, cfg, args.out)
    except (DatasetError, SchemaError, MetricError, DegenerateError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"mvalign: data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except NumericFailure as exc:
        print(f"mvalign: numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    manifest["exit_code"] = code
    with open(os.path.join(args.out, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)
    return code


if __name__ == "__main__":
    sys.exit(main())
