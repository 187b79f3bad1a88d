"""k-fold experiments: AdeNet against LeNet-5 and the random forest on shared
folds, plus the with/without batch-norm ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import explain, features, forest, models, train
from .data import crop_insulators, kfold, resize_gray
from .metrics import ConfusionMatrix2, aggregate_folds, evaluate, metrics_from_confusion, roc_auc
from .synth import crop_relative, load_defects

log = logging.getLogger(__name__)

ARMS = ("adenet", "lenet5", "forest")


@dataclass
class ArmResult:
    name: str
    fold_reports: list = field(default_factory=list)
    fold_confusions: list = field(default_factory=list)
    histories: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)   # record index -> damaged score
    models: list = field(default_factory=list)

    @property
    def mean(self):
        return aggregate_folds(self.fold_reports)

    @property
    def pooled(self):
        return sum(self.fold_confusions[1:], self.fold_confusions[0])

    def pooled_report(self, labels):
        idx = np.array(sorted(self.scores))
        auc = roc_auc(np.array([self.scores[i] for i in idx]), labels[idx])[0]
        return metrics_from_confusion(self.pooled, auc)

    def to_dict(self, labels, timing=True):
        return {
            "fold_mean": self.mean.to_dict(),
            "pooled_confusion": self.pooled.to_dict(),
            "pooled": self.pooled_report(labels).to_dict(),
            "folds": [r.to_dict() for r in self.fold_reports],
            "histories": [h.to_dict(timing) for h in self.histories],
        }


def _fold_seed(seed, fold):
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def run_network(arch, items, labels, plan, config, with_batchnorm=True, keep_models=False, name=None):
    """Train and score one network per fold; ``items`` are crops (adenet) or
    a stacked (n, 1, 32, 32) array (lenet5)."""
    res = ArmResult(name or arch)
    for f in range(len(plan.folds)):
        tr, va = plan.fold(f)
        s = _fold_seed(config.seed, f)
        model = models.build(arch, seed=s, with_batchnorm=with_batchnorm)
        pick = (lambda idx: items[idx]) if isinstance(items, np.ndarray) else (lambda idx: [items[i] for i in idx])
        cfg = train.TrainConfig(**{**config.__dict__, "seed": s})
        model, hist = train.train(model, (pick(tr), labels[tr]), (pick(va), labels[va]), cfg)
        scores = train.predict_scores(model, pick(va), config.batch_size)
        report, cm = evaluate(labels[va], scores)
        res.fold_reports.append(report)
        res.fold_confusions.append(cm)
        res.histories.append(hist)
        res.scores.update(zip(va.tolist(), scores.tolist()))
        if keep_models:
            res.models.append(model)
        log.info("%s fold %d: f1 %.4f auc %s", res.name, f, report.f1, report.roc_auc)
    return res


def run_forest(feats, labels, plan, config: forest.ForestConfig):
    res = ArmResult("forest")
    for f in range(len(plan.folds)):
        tr, va = plan.fold(f)
        cfg = forest.ForestConfig(**{**config.__dict__, "seed": _fold_seed(config.seed, f)})
        fm = forest.train_forest(feats[tr], labels[tr], cfg)
        pred, scores = forest.forest_predict(fm, feats[va])
        report, cm = evaluate(labels[va], scores, predictions=pred)
        res.fold_reports.append(report)
        res.fold_confusions.append(cm)
        res.scores.update(zip(va.tolist(), scores.tolist()))
        log.info("forest fold %d: f1 %.4f", f, report.f1)
    return res


def localization(model_per_fold, crops, manifest, plan, defects):
    """Localization enrichment of damaged-class Grad-CAM on every damaged
    validation crop with a known defect box, each scored by its own fold's model."""
    out = []
    for f, model in enumerate(model_per_fold):
        _, va = plan.fold(f)
        for i in va:
            if i not in defects:
                continue
            rel = crop_relative(defects[i], manifest.records[i].bbox)
            hm = explain.gradcam(model, crops[i], provenance={"record": int(i)})
            out.append(explain.localization_score(hm, rel))
    return np.array(out)


def param_delta(with_bn, without_bn):
    a, b = models.count_params(with_bn), models.count_params(without_bn)
    return {"trainable": a[0] - b[0], "non_trainable": a[1] - b[1]}


def cross_validate(manifest, k=5, config=None, arms=ARMS, ablation=False,
                   forest_config=None, gradcam=False, timing=True):
    """Run every requested arm on the same stratified folds.

    Returns a JSON-ready dict; timings are left out when ``timing`` is false
    so that deterministic runs produce identical reports.
    """
    config = config or train.TrainConfig()
    unknown = set(arms) - set(ARMS)
    if unknown or "adenet" not in arms:
        raise ValueError(f"arms must include adenet and be drawn from {ARMS}")
    plan = kfold(manifest, k=k, seed=config.seed)
    labels = manifest.labels
    crops = [c for c, _ in crop_insulators(manifest)]

    results = {"adenet": run_network("adenet", crops, labels, plan, config, keep_models=gradcam)}
    if "lenet5" in arms:
        results["lenet5"] = run_network("lenet5", resize_gray(crops), labels, plan, config)
    if "forest" in arms:
        fc = forest_config or forest.ForestConfig(seed=config.seed)
        results["forest"] = run_forest(features.extract_all(crops), labels, plan, fc)

    report = {
        "k": k, "seed": config.seed, "n": len(labels), "counts": manifest.counts,
        "config": dict(config.__dict__),
        "folds": plan.to_dict()["folds"],
        "arms": {name: r.to_dict(labels, timing) for name, r in results.items()},
    }
    f1 = {name: r.mean.f1 for name, r in results.items()}
    report["ranking"] = sorted(f1, key=lambda n: -f1[n])
    report["adenet_beats_baselines"] = all(f1["adenet"] > v for n, v in f1.items() if n != "adenet")

    if ablation:
        plain = run_network("adenet", crops, labels, plan, config, with_batchnorm=False,
                            name="adenet_no_bn")
        report["ablation"] = {
            "with_batchnorm": report["arms"]["adenet"]["fold_mean"],
            "without_batchnorm": plain.to_dict(labels, timing)["fold_mean"],
            "param_delta": param_delta(models.build_adenet(), models.build_adenet(with_batchnorm=False)),
        }

    if gradcam:
        sidecar = Path(manifest.root) / "defects.jsonl"
        if sidecar.exists():
            scores = localization(results["adenet"].models, crops, manifest, plan, load_defects(sidecar))
            report["localization"] = {
                "n": int(scores.size),
                "median": float(np.median(scores)) if scores.size else None,
                "mean": float(np.mean(scores)) if scores.size else None,
            }
        else:
            log.warning("no defects.jsonl beside the manifest; skipping localization")
    return report, results
