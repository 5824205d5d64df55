"""Desk-scale end-to-end run: phantoms -> U-Net -> SIJ crops -> both classifier
variants -> evaluation on a distractor-heavy test set with Grad-CAM analysis."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import explain, labels, nets, phantom, pipeline, stats, train
from .anatomy import SijBoxes

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    seed: int = 0
    n_seg: int = 64
    n_clf: int = 400
    n_test: int = 100
    train_distractor: float = 0.5
    test_distractor: float = 1.0
    prevalence: float = 0.5
    val_fraction: float = 0.15
    seg: dict = field(default_factory=dict)
    clf: dict = field(default_factory=dict)


def _corpus(out, n, seed, distractor, prevalence, prefix):
    cfg = phantom.CorpusConfig(n=n, seed=seed, distractor_level=distractor, id_prefix=prefix,
                               grade_distribution=phantom.prevalence_matched_distribution(prevalence))
    path = Path(out) / "manifest.json"
    if path.exists():
        from .manifest import Manifest
        m = Manifest.load(path)
        if len(m) == n and m.seed == seed:
            return m
    return phantom.generate_corpus(cfg, out)


def _prepare(manifest, out, seg_model, clahe):
    seg = pipeline.segment_manifest(manifest, out, model=seg_model, clahe_params=clahe)
    return pipeline.crop_manifest(seg, out, fallback_full=True)


def gradcam_fractions(model, meta, manifest, variant, clahe) -> list[float]:
    """In-box Grad-CAM fraction (positive class) per entry, in the full-image frame."""
    size = tuple(meta["input_size"])
    out = []
    for e in manifest.entries:
        base = pipeline.clf_base(pipeline.source_image(manifest, e, variant), clahe)
        heat = explain.grad_cam(model, pipeline.clf_at_size(base, size), 1)
        truth = SijBoxes.from_dict(e.truth_boxes)
        crop = pipeline.crop_offset(e) if variant == "anatomy_aware" else None
        full = explain.to_frame(heat, truth.image_shape, crop)
        out.append(explain.activation_in_box_fraction(full, truth))
    return out


def run(out_dir, cfg: DeskConfig = DeskConfig()) -> dict:
    out = Path(out_dir)
    t0 = time.perf_counter()
    seg_cfg = train.desk_seg_config(**cfg.seg)
    clf_cfg = train.desk_clf_config(**cfg.clf)
    results = {"config": {"seed": cfg.seed, "n_seg": cfg.n_seg, "n_clf": cfg.n_clf,
                          "n_test": cfg.n_test}}

    seg_m = _corpus(out / "seg_data", cfg.n_seg, phantom.derive_seed(cfg.seed, 1), 0.5, 0.5, "seg")
    s_tr, s_va = labels.split_dataset(seg_m, cfg.val_fraction, cfg.seed)
    seg_res = train.train_segmentation(s_tr, s_va, seg_cfg, cfg.seed, out / "seg_model")
    results["seg_val_dice"] = seg_res.best_metric
    seg_model, _ = nets.load_checkpoint(seg_res.checkpoint)

    clf_m = _corpus(out / "clf_data", cfg.n_clf, phantom.derive_seed(cfg.seed, 2),
                    cfg.train_distractor, cfg.prevalence, "clf")
    test_m = _corpus(out / "test_data", cfg.n_test, phantom.derive_seed(cfg.seed, 3),
                     cfg.test_distractor, cfg.prevalence, "tst")
    clf_m = _prepare(clf_m, out / "clf_prep", seg_model, seg_cfg.clahe)
    test_m = _prepare(test_m, out / "test_prep", seg_model, seg_cfg.clahe)
    results["crop_fallbacks"] = sum(e.crop_status != pipeline.CROP_OK for e in clf_m.entries + test_m.entries)
    c_tr, c_va = labels.split_dataset(clf_m, cfg.val_fraction, cfg.seed)

    for variant in pipeline.VARIANTS:
        res = train.train_classifier(c_tr, c_va, clf_cfg, variant, cfg.seed, out / f"clf_{variant}")
        model, meta = nets.load_checkpoint(res.checkpoint)
        size = tuple(meta["input_size"])
        val_p = pipeline.score_manifest(model, c_va, variant, size, clf_cfg.clahe)
        tau = stats.optimal_cutoff(c_va.labels, val_p)
        val_m = stats.basic_metrics(stats.confusion(c_va.labels, val_p, tau))
        test_p = pipeline.score_manifest(model, test_m, variant, size, clf_cfg.clahe)
        test_metrics = stats.basic_metrics(stats.confusion(test_m.labels, test_p, tau))
        fr = gradcam_fractions(model, meta, test_m, variant, clf_cfg.clahe)
        results[variant] = {
            "config_hash": res.config_hash, "best_val_mcc": res.best_metric,
            "input_size": list(size), "cutoff": tau,
            "val_balanced_accuracy": val_m["balanced_accuracy"],
            "test_auc": stats.auc(test_m.labels, test_p),
            "test_balanced_accuracy": test_metrics["balanced_accuracy"],
            "mean_in_box_fraction": float(np.mean(fr)),
            "test_probabilities": test_p.tolist(),
        }
        log.info("%s: %s", variant, {k: v for k, v in results[variant].items()
                                     if k != "test_probabilities"})
    results["test_labels"] = test_m.labels.tolist()
    results["elapsed_s"] = time.perf_counter() - t0
    (out / "desk_results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results
