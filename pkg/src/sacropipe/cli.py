"""Command-line pipeline: ``python -m sacropipe <command>``.

Stages and their main outputs (each reads the previous stage's manifest):

    generate          phantom corpus + manifest.json (+ followup.json)
    train-seg         U-Net checkpoint, history.csv, split manifests
    segment           segmentation maps + manifest.json
    crop              SIJ crops + manifest.json
    train-clf         classifier checkpoints per variant
    calibrate-cutoff  cutoff.json (accuracy-optimal cut-off on validation)
    evaluate          report.json, roc.csv, confusion.csv, predictions.csv
    compare           comparison.json (DeLong + McNemar on paired variants)
    followup          followup_report.json (progression ratios)
    explain           Grad-CAM arrays/overlays + fractions.json
    report            summary.json + roc.svg

Exit codes: 0 success, 2 config error, 3 missing upstream artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, explain, labels, nets, phantom, pipeline, reporting, stats, train
from .errors import (CIFailure, ConfigError, CropError, DegenerateVarianceError, LocalizationError,
                     NumericalError, SacroError, UpstreamMissingError)
from .manifest import FollowUpManifest, Manifest

log = logging.getLogger("sacropipe")

EXIT_OK, EXIT_CONFIG, EXIT_UPSTREAM, EXIT_NUMERICAL = 0, 2, 3, 4
LOCK_NAME = ".sacropipe.lock"
ECHO_NAME = "config_echo.json"


class ComparabilityError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    """Read a TOML or JSON config file (by extension) into a dict."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            return tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def apply_overrides(cfg: dict, overrides) -> dict:
    """``key=value`` overrides; ``section.key`` reaches into a section.

    Values parse as JSON when possible, else as strings.
    """
    cfg = json.loads(json.dumps(cfg))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        *path, leaf = key.strip().split(".")
        node = cfg
        for part in path:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node[leaf] = value
    return cfg


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, cfg))


@contextmanager
def stage_dir(out: Path):
    """Create the output directory and hold an exclusive lock file while the stage runs."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{out} is locked by another stage (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def write_echo(out: Path, args, config) -> None:
    echo = {"command": args.command, "version": __version__, "seed": args.seed,
            "variant": getattr(args, "variant", None), "config": config,
            "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                          if k not in ("func",)}}
    reporting.write_json(out / ECHO_NAME, echo)


def _require(path, stage: str) -> Path:
    if path is None:
        raise ConfigError(f"missing input; produce it with `{stage}`")
    path = Path(path)
    if not path.exists():
        raise UpstreamMissingError(f"{path} not found; run `{stage}` first")
    return path


def _variants(v: str) -> list[str]:
    return list(pipeline.VARIANTS) if v == "both" else [pipeline.check_variant(v)]


def _checkpoint_for(args, variant: str) -> Path:
    if args.checkpoint:
        return _require(args.checkpoint, "train-clf")
    if args.models:
        return _require(Path(args.models) / variant / "best.pt", "train-clf")
    raise ConfigError("pass --checkpoint or --models")


def _load_clf(path):
    model, meta = nets.load_checkpoint(path)
    if not isinstance(model, nets.Classifier):
        raise ConfigError(f"{path} is not a classifier checkpoint")
    cfg = train.ClfTrainConfig.from_dict(meta["config"])
    return model, meta, cfg


def _read_cutoff(path, variant: str) -> float:
    d = reporting.read_json(_require(path, "calibrate-cutoff"))
    if "cutoffs" in d:
        if variant not in d["cutoffs"]:
            raise ConfigError(f"{path} has no cut-off for {variant}")
        return float(d["cutoffs"][variant]["cutoff"])
    return float(d["cutoff"])


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg):
    c = _section(cfg, "generate")
    fu = c.pop("followup", None)
    prevalence = c.pop("prevalence", None)
    if prevalence is not None:
        c["grade_distribution"] = phantom.prevalence_matched_distribution(float(prevalence)).tolist()
    if "grade_distribution" in c:
        c["grade_distribution"] = np.asarray(c["grade_distribution"], dtype=float)
    c.setdefault("n", 100)
    c["seed"] = args.seed
    try:
        corpus = phantom.CorpusConfig(**c)
    except TypeError as exc:
        raise ConfigError(f"bad generate config: {exc}") from exc
    m = phantom.generate_corpus(corpus, args.out)
    if fu:
        f = phantom.synth_followup(m, float(fu.get("progression_rate", 0.1)),
                                   float(fu.get("high_risk_boost", 0.3)), args.seed)
        f.save(args.out / "followup.json")
    return {"n": len(m), "manifest": "manifest.json"}


def cmd_train_seg(args, cfg):
    m = Manifest.load(_require(args.manifest, "generate"))
    c = train.SegTrainConfig.from_dict(_section(cfg, "segmentation"))
    tr, va = labels.split_dataset(m, c.val_fraction, args.seed)
    tr.save(args.out / "train_manifest.json")
    va.save(args.out / "val_manifest.json")
    res = train.train_segmentation(tr, va, c, args.seed, args.out)
    return {"best_val_mean_dice": res.best_metric, "best_epoch": res.best_epoch}


def cmd_segment(args, cfg):
    m = Manifest.load(_require(args.manifest, "generate"))
    model = clahe = None
    if not args.use_ground_truth:
        model, meta = nets.load_checkpoint(_require(args.checkpoint, "train-seg"))
        if not isinstance(model, nets.UNet):
            raise ConfigError(f"{args.checkpoint} is not a segmentation checkpoint")
        clahe = train.SegTrainConfig.from_dict(meta["config"]).clahe
    out = pipeline.segment_manifest(m, args.out, model, clahe, use_ground_truth=args.use_ground_truth)
    out.save(args.out / "manifest.json")
    return {"n": len(out), "ground_truth": bool(args.use_ground_truth)}


def cmd_crop(args, cfg):
    m = Manifest.load(_require(args.manifest, "segment"))
    c = _section(cfg, "crop")
    out = pipeline.crop_manifest(m, args.out, fallback_full=args.fallback_full,
                                 radius=c.get("radius"), margin=float(c.get("margin", 0.1)))
    out.save(args.out / "manifest.json")
    n_fb = sum(e.crop_status == pipeline.CROP_FALLBACK for e in out.entries)
    return {"n": len(out), "fallback_full": n_fb}


def cmd_train_clf(args, cfg):
    m = Manifest.load(_require(args.manifest, "crop"))
    c = train.ClfTrainConfig.from_dict(_section(cfg, "classifier"))
    tr, va = labels.split_dataset(m, c.val_fraction, args.seed)
    tr.save(args.out / "train_manifest.json")
    va.save(args.out / "val_manifest.json")
    summary = {}
    for v in _variants(args.variant):
        res = train.train_classifier(tr, va, c, v, args.seed, args.out / v)
        summary[v] = {"best_val_mcc": res.best_metric, "best_epoch": res.best_epoch,
                      "config_hash": res.config_hash}
    return summary


def cmd_calibrate(args, cfg):
    m = Manifest.load(_require(args.manifest, "train-clf"))
    cutoffs = {}
    for v in _variants(args.variant):
        model, meta, c = _load_clf(_checkpoint_for(args, v))
        p = pipeline.score_manifest(model, m, v, meta["input_size"], c.clahe)
        tau = stats.optimal_cutoff(m.labels, p, _section(cfg, "calibration").get("objective", "accuracy"))
        cutoffs[v] = {"cutoff": tau, "n": len(m), "config_hash": meta["config_hash"],
                      "accuracy": stats.accuracy_at(m.labels, p, tau)}
    reporting.write_json(args.out / "cutoff.json", {"cutoffs": cutoffs})
    return cutoffs


def _evaluate_variant(args, cfg, m: Manifest, v: str):
    model, meta, c = _load_clf(_checkpoint_for(args, v))
    tau = _read_cutoff(args.cutoff_file, v)
    p = pipeline.score_manifest(model, m, v, meta["input_size"], c.clahe)
    ev = _section(cfg, "evaluation")
    rep = stats.evaluate_scores(m.labels, p, tau, dataset=str(args.manifest),
                                n_boot=int(ev.get("n_boot", 1000)), seed=args.seed)
    return rep, p, tau, meta


def _write_eval(out: Path, rep, m: Manifest, p, tau):
    d = rep.to_dict()
    reporting.write_json(out / "report.json", d)
    reporting.write_roc_csv(out / "roc.csv", d["roc"])
    reporting.write_confusion_csv(out / "confusion.csv", d["confusion"])
    reporting.write_predictions_csv(out / "predictions.csv", stats.make_predictions(m.sample_ids, p, tau))


def cmd_evaluate(args, cfg):
    m = Manifest.load(_require(args.manifest, "crop"))
    summary = {}
    for v in _variants(args.variant):
        rep, p, tau, _ = _evaluate_variant(args, cfg, m, v)
        _write_eval(args.out / v, rep, m, p, tau)
        summary[v] = {"auc": rep.auc["value"], "balanced_accuracy": rep.balanced_accuracy["value"]}
    return summary


def cmd_compare(args, cfg):
    m = Manifest.load(_require(args.manifest, "crop"))
    results = {}
    for v in pipeline.VARIANTS:
        results[v] = _evaluate_variant(args, cfg, m, v)
    hashes = {v: r[3]["config_hash"] for v, r in results.items()}
    if len(set(hashes.values())) != 1:
        raise ComparabilityError(f"variants were trained with different configs: {hashes}")
    for v, (rep, p, tau, _) in results.items():
        _write_eval(args.out / v, rep, m, p, tau)
    (ra, pa, ta, _), (rb, pb, tb, _) = results["standard"], results["anatomy_aware"]
    paired = stats.compare_models(m.labels, pb, pa, tb, ta)
    out = {"datasets": [str(args.manifest)], "model_a": "anatomy_aware", "model_b": "standard",
           "config_hash": hashes["standard"], **paired}
    reporting.write_json(args.out / "comparison.json", out)
    return {"delong_p": paired["delong"]["p"], "mcnemar_p": paired["mcnemar"]["p"]}


def cmd_followup(args, cfg):
    m = Manifest.load(_require(args.manifest, "crop"))
    fu = FollowUpManifest.load(_require(args.followup, "generate"))
    c = _section(cfg, "followup")
    threshold = float(c.get("conf_threshold", stats.CONFIDENT_THRESHOLD))
    neg = m.with_entries([e for e in m.entries if e.label == 0])
    if len(neg) == 0:
        raise ConfigError("manifest has no baseline-negative entries")
    summary = {}
    for v in _variants(args.variant):
        model, meta, cc = _load_clf(_checkpoint_for(args, v))
        tau = _read_cutoff(args.cutoff_file, v) if args.cutoff_file else 0.5
        p = pipeline.score_manifest(model, neg, v, meta["input_size"], cc.clahe)
        res = stats.progression_ratios(stats.make_predictions(neg.sample_ids, p, tau), fu, threshold)
        summary[v] = res.to_dict()
    reporting.write_json(args.out / "followup_report.json", summary)
    return {v: s["risk_ratio"] for v, s in summary.items()}


def cmd_explain(args, cfg):
    from PIL import Image

    m = Manifest.load(_require(args.manifest, "crop"))
    limit = int(_section(cfg, "explain").get("limit", len(m)))
    summary = {}
    for v in _variants(args.variant):
        model, meta, c = _load_clf(_checkpoint_for(args, v))
        size = tuple(meta["input_size"])
        vdir = args.out / v
        (vdir / "heatmaps").mkdir(parents=True, exist_ok=True)
        fractions = {}
        for e in m.entries[:limit]:
            src = pipeline.source_image(m, e, v)
            heat = explain.grad_cam(model, pipeline.clf_at_size(pipeline.clf_base(src, c.clahe), size), 1)
            full_image = pipeline.source_image(m, e, "standard")
            crop = pipeline.crop_offset(e) if v == "anatomy_aware" else None
            full = explain.to_frame(heat, full_image.shape, crop)
            np.save(vdir / "heatmaps" / f"{e.sample_id}.npy", full.values.astype(np.float32))
            Image.fromarray(explain.overlay_rgb(full_image, full)).save(
                vdir / "heatmaps" / f"{e.sample_id}.png")
            boxes = e.truth_boxes or e.sij_boxes
            if boxes:
                fractions[e.sample_id] = explain.activation_in_box_fraction(
                    full, explain.SijBoxes.from_dict(boxes))
        mean = float(np.mean(list(fractions.values()))) if fractions else None
        reporting.write_json(vdir / "fractions.json", {"layer": model.last_conv_layer,
                                                       "mean": mean, "per_sample": fractions})
        report = vdir / "report.json"
        if report.exists():
            d = reporting.read_json(report)
            d["gradcam_in_box_fraction"] = mean
            reporting.write_json(report, d)
        summary[v] = mean
    return summary


def cmd_report(args, cfg):
    src = Path(args.inputs) if args.inputs else args.out
    curves, reports = {}, {}
    for rp in sorted(src.rglob("report.json")):
        d = reporting.read_json(rp)
        name = rp.parent.relative_to(src).as_posix() or "model"
        reports[name] = {k: d.get(k) for k in ("auc", "balanced_accuracy", "sensitivity",
                                               "specificity", "mcc", "cutoff", "n",
                                               "gradcam_in_box_fraction")}
        curves[name] = {"fpr": d["roc"]["fpr"], "tpr": d["roc"]["tpr"], "auc": d["auc"]["value"]}
    if not reports:
        raise UpstreamMissingError(f"no report.json under {src}; run `evaluate` or `compare`")
    extra = {}
    for name in ("comparison.json", "followup_report.json"):
        for p in sorted(src.rglob(name)):
            extra[p.relative_to(src).as_posix()] = reporting.read_json(p)
    reporting.write_json(args.out / "summary.json", {"reports": reports, "attachments": extra})
    (args.out / "roc.svg").write_text(reporting.roc_svg(curves))
    return {"reports": sorted(reports)}


COMMANDS = {
    "generate": (cmd_generate, "render a phantom corpus"),
    "train-seg": (cmd_train_seg, "train the U-Net segmenter"),
    "segment": (cmd_segment, "write segmentation maps"),
    "crop": (cmd_crop, "locate SIJs and crop"),
    "train-clf": (cmd_train_clf, "train classifier variants"),
    "calibrate-cutoff": (cmd_calibrate, "fit the accuracy-optimal cut-off on validation data"),
    "evaluate": (cmd_evaluate, "score a manifest and write evaluation reports"),
    "compare": (cmd_compare, "paired comparison of both variants"),
    "followup": (cmd_followup, "progression analysis of confident false positives"),
    "explain": (cmd_explain, "Grad-CAM heatmaps and in-box fractions"),
    "report": (cmd_report, "bundle reports and render the ROC figure"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sacropipe", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (fn, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="TOML or JSON config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--variant", choices=["standard", "anatomy_aware", "both"], default="both")
        s.add_argument("--manifest", type=Path)
        s.add_argument("--checkpoint", type=Path)
        s.add_argument("--models", type=Path, help="train-clf output directory")
        s.add_argument("--cutoff-file", type=Path)
        s.add_argument("--followup", type=Path)
        s.add_argument("--inputs", type=Path)
        s.add_argument("--fallback-full", action="store_true",
                       help="keep the full image when SIJ localization fails")
        s.add_argument("--use-ground-truth", action="store_true",
                       help="use phantom masks instead of the U-Net")
        s.add_argument("-v", "--verbose", action="store_true")
        s.set_defaults(func=fn)
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (NumericalError, DegenerateVarianceError, CIFailure, LocalizationError, CropError)):
        return EXIT_NUMERICAL
    if isinstance(exc, UpstreamMissingError):
        return EXIT_UPSTREAM
    return EXIT_CONFIG


def configure_threads() -> int:
    import torch

    raw = os.environ.get("SACROPIPE_THREADS", "1")
    try:
        n = max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SACROPIPE_THREADS must be an integer, got {raw!r}") from None
    torch.set_num_threads(n)
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configure_threads()
        cfg = apply_overrides(load_config(args.config), args.set)
        with stage_dir(args.out):
            write_echo(args.out, args, cfg)
            summary = args.func(args, cfg)
        print(json.dumps(reporting._clean(summary), sort_keys=True))
        return EXIT_OK
    except SacroError as exc:
        code = exit_code_for(exc)
        hint = " (use --fallback-full to keep the full image)" if isinstance(exc, LocalizationError) else ""
        print(f"sacropipe {args.command}: error: {exc}{hint}", file=sys.stderr)
        return code
    except (ValueError, TypeError) as exc:
        print(f"sacropipe {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
