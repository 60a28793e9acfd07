import csv
import itertools
import json
import logging

import numpy as np
import pytest
import torch
from conftest import tiny_model
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import preference_brute, r_precision_brute

from clipag.errors import ContractError, ShapeError
from clipag.evalkit import (
    LinearProbeScorer,
    ScorerModel,
    aesthetic_score,
    clip_score,
    clip_score_from_embeddings,
    evaluate_images,
    preference_rate,
    r_precision,
    r_precision_from_similarity,
    require_held_out,
    train_linear_probe,
    write_report,
)


def test_clip_score_identical_and_antipodal():
    e = torch.nn.functional.normalize(torch.randn(3, 5, dtype=torch.float64), dim=-1)
    assert torch.allclose(clip_score_from_embeddings(e, e), torch.full((3,), 100.0, dtype=torch.float64))
    assert torch.equal(clip_score_from_embeddings(e, -e), torch.zeros(3, dtype=torch.float64))


def test_clip_score_direct_formula_and_scale_invariance():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(4, 6, generator=g, dtype=torch.float64), torch.randn(4, 6, generator=g, dtype=torch.float64)
    direct = [100 * max(0.0, float(x @ y / (x.norm() * y.norm()))) for x, y in zip(a, b)]
    assert np.allclose(clip_score_from_embeddings(a, b).numpy(), direct, atol=1e-12)
    assert torch.allclose(clip_score_from_embeddings(a * 3.5, b * 0.2), clip_score_from_embeddings(a, b), atol=1e-12)


def test_clip_score_with_scorer_model():
    scorer = ScorerModel(tiny_model("toy_mlp"), "held-out")
    imgs = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    s = clip_score(imgs, ["a red circle", "a blue ring"], scorer)
    direct = 100 * (scorer.embed_images(imgs) * scorer.embed_texts(["a red circle", "a blue ring"])).sum(-1).clamp_min(0)
    assert torch.allclose(s, direct, atol=1e-12)
    with pytest.raises(ContractError):
        clip_score(imgs, ["one"], scorer)


def test_held_out_tag_check():
    scorer = ScorerModel(None, "robust")
    with pytest.raises(ContractError):
        require_held_out(scorer, "robust")
    require_held_out(scorer, "vanilla")


def test_r_precision_perfect_scorer():
    assert r_precision_from_similarity(np.eye(4)) == 1.0


def test_r_precision_hand_built():
    sim = np.array([[0.9, 0.1, 0.0], [0.5, 0.2, 0.3], [0.1, 0.2, 0.7]])
    # rows 0 and 2 retrieve their own prompt, row 1 retrieves prompt 0
    assert r_precision_from_similarity(sim) == pytest.approx(2 / 3)


def test_r_precision_identical_images_ties_logged(caplog):
    # every image gets the same row; ties resolve to index 0
    sim = np.ones((3, 3))
    with caplog.at_level(logging.INFO):
        assert r_precision_from_similarity(sim) == r_precision_brute(sim) == pytest.approx(1 / 3)
    assert "tied" in caplog.text


@pytest.mark.parametrize("p", [2, 3, 4, 5])
def test_r_precision_enumerable_cases(p):
    # all matrices over a small value alphabet for P <= 3, random draws beyond
    if p <= 3:
        values = [0.0, 0.5, 1.0]
        cases = (np.array(v).reshape(p, p) for v in itertools.islice(itertools.product(values, repeat=p * p), 3000))
    else:
        rng = np.random.default_rng(p)
        cases = (rng.integers(0, 3, size=(p, p)).astype(float) for _ in range(500))
    for sim in cases:
        assert r_precision_from_similarity(sim) == r_precision_brute(sim)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_r_precision_monotone_invariance(seed, p):
    rng = np.random.default_rng(seed)
    sim = rng.uniform(-1, 1, size=(p, p))
    base = r_precision_from_similarity(sim)
    for f in (np.exp, lambda s: 3 * s + 7, lambda s: s**3, np.arctan, lambda s: np.exp(5 * s) - 2):
        assert r_precision_from_similarity(f(sim)) == base


def test_r_precision_contracts(caplog):
    scorer = ScorerModel(tiny_model("toy_mlp"), "s")
    imgs = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    with pytest.raises(ContractError):
        r_precision(imgs[:1], ["only one"], scorer)
    with caplog.at_level(logging.WARNING):
        r_precision(imgs, ["same", "same"], scorer)
    assert "duplicate" in caplog.text
    with pytest.raises(ShapeError):
        r_precision_from_similarity(np.ones((3, 2)))


def test_preference_rate_cases():
    a = [1.0, 2.0, 3.0]
    assert preference_rate(a, a) == 0.5
    assert preference_rate(np.array(a) + 1, a) == 1.0
    assert preference_rate([2, 1, 3], [1, 2, 3]) == pytest.approx((1 + 0 + 0.5) / 3)
    with pytest.raises(ShapeError):
        preference_rate([1, 2], [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=5))
def test_preference_rate_brute_and_complement(pairs):
    a, b = [x for x, _ in pairs], [y for _, y in pairs]
    assert preference_rate(a, b) == preference_brute(a, b)
    assert preference_rate(a, b) + preference_rate(b, a) == 1.0


def test_probe_zero_weights_gives_clipped_bias():
    probe = LinearProbeScorer(np.zeros(8), bias=12.0)
    assert np.all(probe(np.random.default_rng(0).normal(size=(4, 8))) == 10.0)
    probe = LinearProbeScorer(np.zeros(8), bias=5.0)
    assert np.all(probe(np.ones((2, 8))) == 5.0)
    assert probe.score_range == (1.0, 10.0)
    with pytest.raises(ShapeError):
        probe(np.ones((2, 7)))


def test_trained_probe_recovers_ordering(tmp_path):
    rng = np.random.default_rng(0)
    w = rng.normal(size=8)
    x = rng.normal(size=(50, 8))
    y = 5.5 + 0.3 * (x @ w)
    probe = train_linear_probe(x, y)
    test = rng.normal(size=(20, 8))
    truth, pred = test @ w, probe(test)
    assert np.array_equal(np.argsort(truth), np.argsort(pred))
    probe.save(tmp_path / "p.npz")
    assert np.array_equal(LinearProbeScorer.load(tmp_path / "p.npz")(test), pred)


def test_aesthetic_score_uses_scorer_embeddings():
    scorer = ScorerModel(tiny_model("toy_mlp"), "s")
    probe = LinearProbeScorer(np.ones(8), 5.0)
    imgs = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    expected = np.clip(scorer.embed_images(imgs).numpy() @ np.ones(8) + 5.0, 1, 10)
    assert np.allclose(aesthetic_score(imgs, probe, scorer), expected)


def test_report_files(tmp_path):
    scorer = ScorerModel(tiny_model("toy_mlp"), "s")
    imgs = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    prompts = ["a red circle", "a blue ring", "a green cross"]
    probe = LinearProbeScorer(np.ones(8), 5.0)
    records, summary = evaluate_images(imgs, prompts, scorer, probe, baseline=imgs)
    assert summary["preference_rate"] == 0.5
    assert summary["r_precision"] == r_precision(imgs, prompts, scorer)
    assert summary["similarity"] == pytest.approx(clip_score(imgs, prompts, scorer).mean().item())
    assert summary["fid"] is None and summary["inception_score"] is None
    paths = write_report(records, summary, tmp_path)
    lines = paths[0].read_text().splitlines()
    assert len(lines) == 4 and json.loads(lines[-1])["summary"]["scorer"] == "s"
    with paths[1].open() as fh:
        row = list(csv.DictReader(fh))[0]
    assert float(row["r_precision"]) == summary["r_precision"] and row["fid"] == ""
    assert "r_precision" in paths[2].read_text()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_clip_score_positive_rescaling_property(seed, s1, s2):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(3, 5, generator=g, dtype=torch.float64), torch.randn(3, 5, generator=g, dtype=torch.float64)
    assert torch.allclose(clip_score_from_embeddings(a * s1, b * s2), clip_score_from_embeddings(a, b), atol=1e-9)
