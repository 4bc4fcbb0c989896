"""Seeds x arms comparison on synthetic data.

Every arm of one seed sees the same synthetic dataset, the same
validation split and the same initial weights; only the training
strategy differs.  The ``popcorn-half`` arm is POPCORN stopped after
half of its selection cycles.
"""
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from .data import split_validation
from .errors import ConfigError
from .model import predict_mask
from .report import ArmResult, build_report, make_study, save_result
from .stats import image_metrics
from .synth import synthesize_dataset
from .trainer import Trainer, expected_cycles

ARMS = ("popcorn", "popcorn-half", "no-cr", "random-select", "baseline-cr", "baseline")


def evaluate(predict, test, arm="", strategy=""):
    """ImageMetrics for ``predict(volume) -> mask`` over ``test`` in order."""
    images = [image_metrics(predict(s.volume), s.mask, s.id) for s in test]
    return ArmResult(arm, strategy, images)


def evaluate_model(model, test, threshold=0.5, arm="", strategy=""):
    return evaluate(lambda v: predict_mask(model, v, threshold), test, arm, strategy)


def arm_trainer_config(trainer_cfg, arm, n_unlabeled, seed):
    if arm not in ARMS:
        raise ConfigError(f"unknown study arm {arm!r}; choose from {list(ARMS)}")
    if arm == "popcorn-half":
        half = expected_cycles(n_unlabeled, trainer_cfg.K) // 2
        return dataclasses.replace(trainer_cfg, strategy="popcorn", max_cycles=half, seed=seed)
    return dataclasses.replace(trainer_cfg, strategy=arm, max_cycles=None, seed=seed)


def run_arm(cfg, arm, pool, validation, test, seed, run_dir=None, reproducible=False):
    tcfg = arm_trainer_config(cfg.trainer, arm, len(pool.unlabeled), seed)
    trainer = Trainer(tcfg, cfg.model, cfg.augment, cfg.pairs, cfg.optimizer)
    t0 = time.perf_counter()
    result = trainer.run(pool, validation, test, run_dir=run_dir, reproducible=reproducible)
    seconds = time.perf_counter() - t0
    out = evaluate_model(result.model, test, cfg.evaluation.threshold, arm, tcfg.strategy)
    out.curve = [{"cycle": c.cycle, "validation_dice": c.validation_dice, "test_dice": c.test_dice} for c in result.cycles]
    out.meta = {"seed": seed, "cycles": len(result.cycles), "seconds": 0.0 if reproducible else round(seconds, 2),
                "final_model_hash": result.model.state_hash()}
    return out


def run_study(cfg, seeds, arms=ARMS, out_dir=None, reproducible=False, progress=None):
    """Run every arm for every seed; returns ``{seed: StudyResult}``.

    With ``out_dir`` each seed gets a ``seed_<n>/`` directory holding one
    result file per arm and the rendered report.
    """
    studies = {}
    for seed in seeds:
        data = synthesize_dataset(cfg.synth, seed)
        pool, validation = split_validation(data.pool, cfg.trainer.validation_fraction)
        results = []
        for arm in arms:
            res = run_arm(cfg, arm, pool, validation, data.test, seed, reproducible=reproducible)
            results.append(res)
            if progress:
                progress(seed, arm, res)
        study = make_study(results)
        studies[seed] = study
        if out_dir is not None:
            seed_dir = Path(out_dir) / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            for r in results:
                save_result(r, seed_dir / f"{r.arm}.json")
            build_report(study, seed_dir, cfg.evaluation.significance_level)
    if out_dir is not None:
        with open(Path(out_dir) / "verdict.json", "w") as fh:
            json.dump(verdict(studies, alpha=cfg.evaluation.significance_level), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return studies


def verdict(studies, arm="popcorn", reference="baseline", alpha=0.05):
    """Per-seed mean-Dice comparison of ``arm`` against ``reference``."""
    rows = []
    for seed, study in studies.items():
        a, b = study.arm(arm), study.arm(reference)
        res = study.pvalues[(arm, reference)]
        ranking = sorted(study.arms, key=lambda r: -r.means()["dice"])
        rows.append({
            "seed": seed,
            arm: a.means()["dice"],
            reference: b.means()["dice"],
            "better": bool(a.means()["dice"] > b.means()["dice"]),
            "p_value": None if res.inconclusive else res.p_value,
            "significant": bool(not res.inconclusive and res.p_value < alpha),
            "dice_ordering": [r.arm for r in ranking],
        })
    return {
        "arm": arm,
        "reference": reference,
        "seeds": rows,
        "n_better": sum(r["better"] for r in rows),
        "n_significant": sum(r["significant"] for r in rows),
        "n_better_significant": sum(r["better"] and r["significant"] for r in rows),
        "mean_dice": {r.arm: float(np.mean([s.arm(r.arm).means()["dice"] for s in studies.values()]))
                      for r in next(iter(studies.values())).arms} if studies else {},
    }
