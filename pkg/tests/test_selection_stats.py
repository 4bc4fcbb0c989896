import itertools
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from popcorn import _accel, kernels
from popcorn.errors import DataError, ShapeError
from popcorn.report import ArmResult, build_report, load_result, make_study, save_result, table_rows
from popcorn.selection import ProximityGraph, build_graph, proximity_score, random_select, select
from popcorn.stats import ImageMetrics, image_metrics, pooled_metrics, significance, wilcoxon_signed_rank


def test_graph_examples():
    g = build_graph({"a": [0.0, 0.0]}, {"x": [3.0, 4.0]})
    assert g.matrix.tolist() == [[25.0]]
    assert build_graph({"a": [1.5]}, {"b": [1.5]}).matrix.tolist() == [[0.0]]


def test_graph_double_loop_oracle(rng):
    u = {f"u{k}": rng.standard_normal(5) for k in range(2)}
    t = {f"t{k}": rng.standard_normal(5) for k in range(3)}
    g = build_graph(u, t)
    assert g.u_ids == ["u0", "u1"] and g.t_ids == ["t0", "t1", "t2"]
    for i, ui in enumerate(g.u_ids):
        for j, tj in enumerate(g.t_ids):
            acc = 0.0
            for a, b in zip(u[ui], t[tj]):
                acc += (a - b) * (a - b)
            assert g.matrix[i, j] == acc


def test_graph_errors():
    with pytest.raises(DataError):
        build_graph({}, {"a": [1.0]})
    with pytest.raises(ShapeError):
        build_graph({"a": [1.0, 2.0]}, {"b": [1.0]})


def test_score_examples():
    assert proximity_score([5.0], 3) == 5.0
    assert proximity_score([4.0, 1.0, 9.0, 2.0], 2) == 3.0
    assert proximity_score([0.7] * 6, 4) == pytest.approx(4 * 0.7, abs=1e-15)
    with pytest.raises(ValueError):
        proximity_score([1.0], 0)


def test_select_trivial_cases(rng):
    g = build_graph({"only": [9.0, 9.0]}, {"t": [0.0, 0.0]})
    assert select(g, 1, 5).selected_ids == ["only"]
    u = {f"u{k}": rng.standard_normal(3) for k in range(6)}
    g = build_graph(u, {f"t{k}": rng.standard_normal(3) for k in range(4)})
    res = select(g, 6, 2)
    assert sorted(res.selected_ids) == sorted(u)
    assert res.scores == sorted(res.scores)
    assert select(g, 100, 2).selected_ids == res.selected_ids


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_order_invariance(seed):
    rng = np.random.default_rng(seed)
    u = {f"u{k}": np.round(rng.standard_normal(2)) for k in range(8)}
    t = {f"t{k}": np.round(rng.standard_normal(2)) for k in range(3)}
    keys = list(u)
    rng.shuffle(keys)
    shuffled = {k: u[k] for k in keys}
    a, b = select(build_graph(u, t), 3, 2), select(build_graph(shuffled, t), 3, 2)
    assert a.selected_ids == b.selected_ids and a.scores == b.scores


def test_monotone_coverage(rng):
    u = {f"u{k:02d}": rng.standard_normal(3) for k in range(11)}
    t = {f"t{k}": rng.standard_normal(3) for k in range(4)}
    seen, last_min = [], -math.inf
    while u:
        res = select(build_graph(u, t), 3, 2)
        assert res.scores[0] >= last_min
        last_min = res.scores[0]
        seen += res.selected_ids
        for i in res.selected_ids:
            del u[i]
    assert len(seen) == len(set(seen)) == 11


def test_zero_score_only_for_coincident(rng):
    t = {"a": np.array([1.0, 2.0]), "b": np.array([1.0, 2.0]), "c": np.array([5.0, 5.0])}
    res = select(build_graph({"x": np.array([1.0, 2.0]), "y": np.array([1.0, 2.1])}, t), 2, 2)
    assert res.selected_ids == ["x", "y"] and res.scores[0] == 0.0 and res.scores[1] > 0.0


def test_random_select(rng):
    ids = [f"u{k}" for k in range(10)]
    res = random_select(ids, 4, np.random.default_rng(3))
    assert len(set(res.selected_ids)) == 4 and set(res.selected_ids) <= set(ids)
    assert res.selected_ids == random_select(list(reversed(ids)), 4, np.random.default_rng(3)).selected_ids
    assert all(math.isnan(s) for s in res.scores)


@pytest.mark.parametrize("flag", [True, False])
def test_kernel_backends_agree(flag, rng):
    prev = _accel.use_numba(flag)
    try:
        u, t = rng.standard_normal((7, 4)), rng.standard_normal((5, 4))
        d = kernels.pairwise_sq_dist(u, t)
        assert np.allclose(d, ((u[:, None] - t[None]) ** 2).sum(-1), atol=1e-12)
        assert np.allclose(kernels.smallest_sums(d, 3), np.sort(d, axis=1)[:, :3].sum(1), atol=1e-12)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        y = kernels.conv_forward(x, w, np.zeros(4))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 8, 8))
        for i in range(8):
            for j in range(8):
                ref[:, :, i, j] = np.einsum("bcuv,ocuv->bo", xp[:, :, i:i + 3, j:j + 3], w)
        assert np.allclose(y, ref, atol=1e-10)
    finally:
        _accel.use_numba(prev)


# -- metrics ------------------------------------------------------------------------


def test_metric_examples():
    t = np.zeros((4, 4), np.uint8)
    t[:2] = 1
    m = image_metrics(t, t)
    assert (m.dice, m.precision, m.sensitivity) == (1.0, 1.0, 1.0)
    half = np.zeros_like(t)
    half[0] = 1
    m = image_metrics(half, t)
    assert m.precision == 1.0 and m.sensitivity == 0.5 and m.dice == pytest.approx(2 / 3, abs=1e-12)
    m = image_metrics(1 - t, t)
    assert (m.dice, m.precision, m.sensitivity) == (0.0, 0.0, 0.0)
    with pytest.raises(ShapeError):
        image_metrics(t, t[:3])


def test_pooled_metrics():
    a = ImageMetrics("a", 0, 0, 0, tp=2, fp=1, fn=1)
    b = ImageMetrics("b", 0, 0, 0, tp=0, fp=0, fn=2)
    p = pooled_metrics([a, b])
    assert p["dice"] == pytest.approx(4 / 8) and p["precision"] == pytest.approx(2 / 3)
    assert p["sensitivity"] == pytest.approx(2 / 5)


# -- Wilcoxon -------------------------------------------------------------------------


def test_wilcoxon_examples():
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0] * 6)
    assert res.statistic == 0.0 and res.p_value == 0.03125 and res.method == "exact"
    same = wilcoxon_signed_rank([0.3] * 8, [0.3] * 8)
    assert same.inconclusive and math.isnan(same.p_value)
    d = np.tile([1.0, -1.0], 20)
    assert wilcoxon_signed_rank(d, np.zeros_like(d)).p_value > 0.85
    with pytest.raises(ShapeError):
        wilcoxon_signed_rank([1, 2], [1])


def test_wilcoxon_tied_exact_against_enumeration():
    d = np.array([1.0, 1.0, 2.0, -2.0, 3.0, 3.0, 3.0, -1.0])
    r = scipy.stats.rankdata(np.abs(d))
    w = min(r[d > 0].sum(), r[d < 0].sum())
    count = sum(min(sum(rk for rk, s in zip(r, signs) if s), sum(rk for rk, s in zip(r, signs) if not s)) <= w
                for signs in itertools.product([0, 1], repeat=len(d)))
    assert wilcoxon_signed_rank(d, np.zeros_like(d)).p_value == pytest.approx(count / 2 ** len(d), abs=1e-15)


def test_wilcoxon_against_scipy(rng):
    for n in (8, 12, 15):
        a, b = rng.uniform(size=n), rng.uniform(size=n)
        ours = wilcoxon_signed_rank(a, b)
        ref = scipy.stats.wilcoxon(a, b, method="exact")
        assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-12)
        assert ours.statistic == ref.statistic
    for n in (20, 40):
        a, b = rng.uniform(size=n), rng.uniform(size=n)
        ref = scipy.stats.wilcoxon(a, b, method="approx", correction=True)
        assert wilcoxon_signed_rank(a, b).p_value == pytest.approx(ref.pvalue, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-6, 6).filter(bool), min_size=5, max_size=25))
def test_wilcoxon_symmetry(d):
    a = np.array(d, dtype=float)
    x, y = wilcoxon_signed_rank(a, np.zeros_like(a)), wilcoxon_signed_rank(np.zeros_like(a), a)
    assert x.statistic == y.statistic and x.p_value == y.p_value
    assert 0.0 < x.p_value <= 1.0


def test_significance():
    assert significance(0.049) and not significance(0.05) and not significance(1.0)
    assert not significance(float("nan"))
    with pytest.raises(ValueError):
        significance(1.5)


# -- report --------------------------------------------------------------------------


def _arm(name, dices):
    ims = [ImageMetrics(f"t{k}", d, d, d, 1, 0, 0) for k, d in enumerate(dices)]
    return ArmResult(name, name, ims, [{"cycle": 1, "validation_dice": 0.5, "test_dice": 0.4}])


def test_report_single(tmp_path):
    study = make_study([_arm("popcorn", [0.8])])
    files = build_report(study, tmp_path)
    assert len(table_rows(study)) == 1
    assert "no pairs" in files["significance_txt"].read_text()


def test_report_identical_is_inconclusive(tmp_path):
    study = make_study([_arm("popcorn", [0.5] * 6), _arm("baseline", [0.5] * 6)])
    build_report(study, tmp_path)
    assert "inconclusive" in (tmp_path / "significance.txt").read_text()


def test_report_three_arms(tmp_path, rng):
    arms = [_arm(n, rng.uniform(size=20)) for n in ("popcorn", "no-cr", "baseline")]
    study = make_study(arms)
    build_report(study, tmp_path)
    rows = (tmp_path / "metrics_table.csv").read_text().strip().splitlines()
    assert len(rows) == 4
    sig = (tmp_path / "significance.csv").read_text().strip().splitlines()
    assert len(sig) == 4 and all(len(r.split(",")) == 4 for r in sig)
    assert sig[1].split(",")[1] == "" and sig[2].split(",")[2] == ""
    assert sorted(r["dice_rank"] for r in table_rows(study)) == [1, 2, 3]
    txt = (tmp_path / "metrics_table.txt").read_text()
    assert "Trained on" in txt and "Lab + Pseudo" in txt and "Voxel-level" in txt
    curves = (tmp_path / "curves.csv").read_text().splitlines()
    assert curves[0] == "arm,cycle,validation_dice,test_dice" and len(curves) == 4


def test_report_mismatched_ids(tmp_path):
    a = _arm("popcorn", [0.1, 0.2])
    b = _arm("baseline", [0.1, 0.2])
    b.images[0].id = "other"
    with pytest.raises(DataError):
        make_study([a, b])


def test_result_file_round_trip(tmp_path):
    a = _arm("popcorn", [0.1, 0.9])
    save_result(a, tmp_path / "r.json")
    b = load_result(tmp_path / "r.json")
    assert b.test_ids == a.test_ids and b.means() == a.means() and b.curve == a.curve
    with pytest.raises(DataError):
        load_result(tmp_path / "missing.json")
