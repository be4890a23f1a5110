import csv
import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tiny_train_config
from mfeiqa import gmad
from mfeiqa.contrastive import DistortionEncoder
from mfeiqa.gmad import GALLERY_COLUMNS, GmadQuery, gmad_pairs, gmad_report, quality_levels, run_gmad, score_database
from mfeiqa.pipeline import train


def brute_force(att, dfd, levels, lv, eps):
    best = None
    for i, j in itertools.combinations(np.flatnonzero(levels == lv), 2):
        if abs(dfd[i] - dfd[j]) <= eps:
            gap = abs(att[i] - att[j])
            if best is None or gap > best[1]:
                best = ((i, j), gap)
    return best


def test_equal_defender_example():
    (res,) = gmad_pairs(GmadQuery([1.0, 5.0, 9.0], [0.3, 0.3, 0.3], level_count=1))
    assert res.pair == (0, 2) and res.gap == 8.0


def test_attacker_equal_defender_bound():
    s = np.random.default_rng(0).random(40)
    q = GmadQuery(s, s, level_count=3)
    for res in gmad_pairs(q):
        assert res.gap <= q.eps


def test_quality_levels_top_is_zero():
    d = np.arange(10.0)
    lv = quality_levels(d, 2)
    assert set(np.flatnonzero(lv == 0)) == set(range(5, 10))
    assert np.all(quality_levels(d, 1) == 0)


def test_errors():
    with pytest.raises(ValueError):
        GmadQuery([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        GmadQuery([1, 2], [1, 2], eps=0.0)
    with pytest.raises(ValueError, match="fewer than two"):
        gmad_pairs(GmadQuery([1, 2, 3], [1, 2, 3], level_count=3))
    with pytest.raises(ValueError, match="no pair"):
        gmad_pairs(GmadQuery([1, 2, 3, 4], [0, 10, 20, 30], level_count=1, eps=1.0))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(4, 60), levels=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_matches_exhaustive_search(n, levels, seed):
    rng = np.random.default_rng(seed)
    att, dfd = rng.random(n), np.round(rng.random(n), 1)  # rounding creates many eligible ties
    q = GmadQuery(att, dfd, level_count=levels, eps=0.05)
    lv = quality_levels(dfd, levels)
    try:
        results = gmad_pairs(q)
    except ValueError:
        assert any(brute_force(att, dfd, lv, k, 0.05) is None for k in range(levels))
        return
    for res in results:
        i, j = res.pair
        assert lv[i] == lv[j] == res.level and abs(dfd[i] - dfd[j]) <= q.eps
        assert res.gap == brute_force(att, dfd, lv, res.level, 0.05)[1]


def test_role_swap_changes_binding_constraint():
    rng = np.random.default_rng(3)
    a, b = rng.random(50), rng.random(50)
    panels = run_gmad({"a": a, "b": b})
    assert len(panels) == 4
    for p in panels:
        i, j = p["result"].pair
        dfd = {"a": a, "b": b}[p["defender"]]
        assert abs(dfd[i] - dfd[j]) <= 0.02 * (dfd.max() - dfd.min())


@pytest.fixture(scope="module")
def two_checkpoints(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    torch.manual_seed(0)
    enc = DistortionEncoder((4, 8, 8, 16)).eval()
    a = train(tiny_train_config(), toy_corpus, enc).save(out / "a.safetensors")
    b = train(tiny_train_config(addition_fusion=True), toy_corpus, enc).save(out / "b.safetensors")
    return a, b


def test_score_database_cache(two_checkpoints, toy_corpus, tmp_path, monkeypatch):
    first = score_database(two_checkpoints[0], toy_corpus, 2, 0, tmp_path)
    assert first.shape == (len(toy_corpus),)
    assert np.array_equal(first, score_database(two_checkpoints[0], toy_corpus, 2, 0, None))

    def boom(*a, **k):
        raise AssertionError("recomputed despite cache")

    monkeypatch.setattr(gmad, "predict_manifest", boom)
    assert np.array_equal(first, score_database(two_checkpoints[0], toy_corpus, 2, 0, tmp_path))


def test_report_gallery(two_checkpoints, toy_corpus, tmp_path):
    scores = {n: score_database(p, toy_corpus, 2, 0) for n, p in zip(("full", "add"), two_checkpoints)}
    panels = run_gmad(scores, level_count=2, eps_fraction=0.2)
    csv_path, html_path = gmad_report(panels, scores, toy_corpus, tmp_path / "g1")
    rows = list(csv.DictReader(open(csv_path)))
    assert list(rows[0]) == GALLERY_COLUMNS
    assert len(rows) == 4
    assert {(r["level"], r["role"].split(";")[0]) for r in rows} == {
        (lv, f"defender={d}") for lv in ("high", "low") for d in ("full", "add")
    }
    by_path = {r.path: r.raw_score for r in toy_corpus.records}
    for r in rows:
        assert float(r["mos_a"]) == by_path[r["img_a"]] and float(r["mos_b"]) == by_path[r["img_b"]]
    html = html_path.read_text()
    assert html.count("class='panel'") == 4 and html.count("<img") == 8
    again = gmad_report(panels, scores, toy_corpus, tmp_path / "g2")
    assert again[0].read_bytes() == csv_path.read_bytes()
    assert again[1].read_text().count("<img") == 8


def test_report_missing_image(toy_corpus, tmp_path):
    import shutil

    root = tmp_path / "copy"
    shutil.copytree(toy_corpus.root, root)
    m = type(toy_corpus)(toy_corpus.name, toy_corpus.records, toy_corpus.reference_paths, root)
    s = np.linspace(0, 1, len(m))
    panels = run_gmad({"x": s, "y": s[::-1]}, level_count=1, eps_fraction=0.5)
    i, _ = panels[0]["result"].pair
    (root / m.records[i].path).unlink()
    with pytest.raises(FileNotFoundError):
        gmad_report(panels, {"x": s, "y": s[::-1]}, m, tmp_path / "out")
    with pytest.raises(ValueError):
        gmad_report([], {}, m, tmp_path / "out")
