"""Study results, comparison tables and significance matrices."""
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .stats import ALPHA, ImageMetrics, pooled_metrics, significance, wilcoxon_signed_rank

# arm name -> (label, trained on, CR on)
ARM_LABELS = {
    "popcorn": ("Our method", "Lab + Pseudo", "Lab + Pseudo"),
    "popcorn-half": ("Ours with half selection steps", "Lab + Pseudo", "Lab + Pseudo"),
    "no-cr": ("Ours without CR", "Lab + Pseudo", "None"),
    "random-select": ("Ours without proximity graph", "Lab + Pseudo", "Lab + Pseudo"),
    "baseline-cr": ("Baseline with CR", "Lab", "Lab"),
    "baseline": ("Baseline", "Lab", "None"),
}
METRICS = ("dice", "precision", "sensitivity")


@dataclass
class ArmResult:
    arm: str
    strategy: str
    images: list  # ImageMetrics, in test-id order
    curve: list = field(default_factory=list)  # {"cycle", "validation_dice", "test_dice"}
    meta: dict = field(default_factory=dict)

    @property
    def test_ids(self):
        return [m.id for m in self.images]

    def means(self):
        if not self.images:
            return {k: float("nan") for k in METRICS}
        return {k: float(np.mean([getattr(m, k) for m in self.images])) for k in METRICS}

    def to_dict(self):
        return {
            "arm": self.arm,
            "strategy": self.strategy,
            "metric_level": "voxel",
            "test_ids": self.test_ids,
            "images": [m.to_dict() for m in self.images],
            "mean": self.means(),
            "pooled": pooled_metrics(self.images),
            "curve": self.curve,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        images = [ImageMetrics(**{k: v for k, v in m.items()}) for m in d["images"]]
        if [m.id for m in images] != list(d.get("test_ids", [m.id for m in images])):
            raise DataError(f"result for {d.get('arm')!r}: test_ids disagree with image list")
        return cls(d["arm"], d["strategy"], images, d.get("curve", []), d.get("meta", {}))


def save_result(result, path):
    with open(path, "w") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_result(path):
    try:
        with open(path) as fh:
            return ArmResult.from_dict(json.load(fh))
    except FileNotFoundError:
        raise DataError(f"no result file at {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed result file ({exc})") from None


@dataclass
class StudyResult:
    arms: list  # ArmResult, display order
    test_ids: list
    pvalues: dict  # (arm_a, arm_b) -> WilcoxonResult on Dice

    def arm(self, name):
        for a in self.arms:
            if a.arm == name:
                return a
        raise KeyError(name)


def make_study(results):
    """Pair up arm results evaluated on the same ordered test ids."""
    results = list(results)
    if not results:
        raise DataError("a study needs at least one result")
    ids = results[0].test_ids
    for r in results[1:]:
        if r.test_ids != ids:
            raise DataError(f"arm {r.arm!r} was evaluated on a different test-id list than {results[0].arm!r}")
    names = [r.arm for r in results]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate arm names: {names}")
    pvalues = {}
    for i, a in enumerate(results):
        for b in results[i + 1:]:
            res = wilcoxon_signed_rank([m.dice for m in a.images], [m.dice for m in b.images])
            pvalues[(a.arm, b.arm)] = res
            pvalues[(b.arm, a.arm)] = res
    return StudyResult(results, list(ids), pvalues)


def _rank(values):
    """Dense-free competition ranks, 1 = highest."""
    order = sorted(range(len(values)), key=lambda k: -values[k])
    ranks = [0] * len(values)
    for pos, k in enumerate(order):
        if pos and values[k] == values[order[pos - 1]]:
            ranks[k] = ranks[order[pos - 1]]
        else:
            ranks[k] = pos + 1
    return ranks


def table_rows(study):
    means = [a.means() for a in study.arms]
    pooled = [pooled_metrics(a.images) for a in study.arms]
    ranks = {k: _rank([m[k] for m in means]) for k in METRICS}
    rows = []
    for k, a in enumerate(study.arms):
        label, trained, cr = ARM_LABELS.get(a.arm, (a.arm, "?", "?"))
        row = {"arm": a.arm, "strategy": label, "trained_on": trained, "cr_on": cr, "n_images": len(a.images)}
        for m in METRICS:
            row[m] = means[k][m]
            row[m + "_rank"] = ranks[m][k]
            row["pooled_" + m] = pooled[k][m]
        rows.append(row)
    return rows


def significance_matrix(study, alpha=ALPHA):
    """Square matrix of Dice Wilcoxon p-values (None on the diagonal)."""
    names = [a.arm for a in study.arms]
    mat = []
    for a in names:
        row = []
        for b in names:
            if a == b:
                row.append(None)
            else:
                res = study.pvalues[(a, b)]
                row.append({"p": None if res.inconclusive else res.p_value, "statistic": None if res.inconclusive else res.statistic,
                            "n": res.n, "method": res.method,
                            "significant": (not res.inconclusive) and significance(res.p_value, alpha)})
        mat.append(row)
    return names, mat


def _pct(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.2f}%"


def _aligned(header, rows):
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h)) for i, h in enumerate(header)]
    lines = [" | ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def format_table(study):
    rows = table_rows(study)
    header = ["Strategy", "Trained on", "CR on", "Dice", "Precision", "Sensitivity",
              "Dice (pooled)", "Precision (pooled)", "Sensitivity (pooled)"]
    body = []
    for r in rows:
        body.append([r["strategy"], r["trained_on"], r["cr_on"]]
                    + [f"{_pct(r[m])} ({r[m + '_rank']})" for m in METRICS]
                    + [_pct(r["pooled_" + m]) for m in METRICS])
    note = (f"Voxel-level metrics over {len(study.test_ids)} test images; image-level means with rank "
            "in parentheses (1 = best), pooled = from voxel counts summed over images.\n")
    return _aligned(header, body) + note


def format_significance(study, alpha=ALPHA):
    names, mat = significance_matrix(study, alpha)
    if len(names) < 2:
        return "(no pairs to compare)\n"
    body = []
    for a, row in zip(names, mat):
        cells = []
        for c in row:
            if c is None:
                cells.append("-")
            elif c["p"] is None:
                cells.append("inconclusive")
            else:
                cells.append(f"{c['p']:.4g}{'*' if c['significant'] else ''}")
        body.append([a] + cells)
    note = f"Two-sided Wilcoxon signed-rank on image-level Dice; * marks p < {alpha}.\n"
    return _aligned(["arm"] + names, body) + note


def build_report(study, out_dir, alpha=ALPHA):
    """Write the comparison table, significance matrix and Dice-vs-cycle curves."""
    if not study.arms:
        raise DataError("empty study")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out}: {exc}") from None
    rows = table_rows(study)
    files = {}

    files["table_txt"] = out / "metrics_table.txt"
    files["table_txt"].write_text(format_table(study))
    files["table_csv"] = out / "metrics_table.csv"
    with open(files["table_csv"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)

    names, mat = significance_matrix(study, alpha)
    files["significance_txt"] = out / "significance.txt"
    files["significance_txt"].write_text(format_significance(study, alpha))
    files["significance_csv"] = out / "significance.csv"
    with open(files["significance_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm"] + names)
        for a, row in zip(names, mat):
            w.writerow([a] + ["" if c is None else ("inconclusive" if c["p"] is None else repr(c["p"])) for c in row])

    files["curves_csv"] = out / "curves.csv"
    with open(files["curves_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "cycle", "validation_dice", "test_dice"])
        for a in study.arms:
            for pt in a.curve:
                w.writerow([a.arm, pt.get("cycle"), _num(pt.get("validation_dice")), _num(pt.get("test_dice"))])

    files["summary_json"] = out / "summary.json"
    with open(files["summary_json"], "w") as fh:
        json.dump({"test_ids": study.test_ids, "table": rows,
                   "significance": {"arms": names, "matrix": mat}}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return files


def _num(x):
    return "" if x is None else repr(float(x))
