import json
import logging
from collections import Counter

import numpy as np
import pytest
import torch
from oracles import box_downsample
from PIL import Image

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from clipag.errors import ConfigError, DataError
from clipag.imageio import load_png, save_png
from clipag.ingest import (
    DATA_ROOT_ENV,
    FULL_SCALE_MIX_PRESET,
    load_labeled,
    load_pairs,
    read_manifest,
    uniform_mix,
)


def _write(tmp_path, n, size=8, broken=(), name="m.jsonl"):
    (tmp_path / "img").mkdir(exist_ok=True)
    lines = []
    for i in range(n):
        rel = f"img/{i}.png"
        if i in broken:
            (tmp_path / rel).write_bytes(b"not a png")
        else:
            arr = np.full((size, size, 3), (i * 20) % 256, dtype=np.uint8)
            Image.fromarray(arr).save(tmp_path / rel)
        lines.append(json.dumps({"image": rel, "caption": f"caption {i}", "label": i % 2}))
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


def _caption_index(c):
    return int(c.split()[-1])


def test_four_records_batch_two(tmp_path):
    m = _write(tmp_path, 4)
    batches = list(load_pairs(m, 2, resolution=(8, 8)))
    assert len(batches) == 2
    assert all(x.shape == (2, 3, 8, 8) for x, _ in batches)
    seen = sorted(_caption_index(c) for _, caps in batches for c in caps)
    assert seen == [0, 1, 2, 3]


def test_alignment_and_deterministic_order(tmp_path):
    m = _write(tmp_path, 10)
    a = list(load_pairs(m, 3, shuffle_seed=5, resolution=(8, 8), epochs=2))
    b = list(load_pairs(m, 3, shuffle_seed=5, resolution=(8, 8), epochs=2, workers=0))
    assert [c for _, c in a] == [c for _, c in b]
    for x, caps in a:
        for img, cap in zip(x, caps):
            i = _caption_index(cap)
            assert torch.allclose(img, torch.full_like(img, ((i * 20) % 256) / 255))
    # distinct permutation each epoch
    order = [c for _, caps in a for c in caps]
    assert order[:10] != order[10:] and sorted(order[:10]) == sorted(order[10:])
    c = list(load_pairs(m, 3, shuffle_seed=6, resolution=(8, 8)))
    assert [x for _, x in c] != [x for _, x in a[:4]]


def test_resize_matches_box_filter(tmp_path):
    rng = np.random.default_rng(0)
    img = torch.from_numpy(rng.integers(0, 256, size=(3, 8, 8)).astype(np.float32) / 255)
    save_png(img, tmp_path / "c.png")
    loaded = load_png(tmp_path / "c.png", (4, 4))[0].double().numpy()
    assert np.allclose(loaded, box_downsample(img.double().numpy(), 2), atol=1e-6)


def test_checkerboard_downsamples_to_gray(tmp_path):
    check = (np.indices((8, 8)).sum(0) % 2).astype(np.uint8) * 255
    Image.fromarray(np.stack([check] * 3, -1)).save(tmp_path / "c.png")
    assert torch.allclose(load_png(tmp_path / "c.png", (4, 4)), torch.full((1, 3, 4, 4), 0.5))


def test_skip_within_cap_logs(tmp_path, caplog):
    m = _write(tmp_path, 10, broken={3})
    with caplog.at_level(logging.WARNING):
        batches = list(load_pairs(m, 4, resolution=(8, 8), max_skip_fraction=0.1))
    caps = [c for _, cs in batches for c in cs]
    assert len(caps) == 9 and "caption 3" not in caps
    assert "3.png" in caplog.text
    assert [len(c) for _, c in batches] == [4, 4, 1]


def test_skip_over_cap_raises(tmp_path):
    m = _write(tmp_path, 10, broken={3, 4})
    with pytest.raises(DataError, match="cap"):
        list(load_pairs(m, 4, resolution=(8, 8), max_skip_fraction=0.1))


def test_debug_mode_checks_alignment(tmp_path):
    m = _write(tmp_path, 5)
    assert len(list(load_pairs(m, 2, resolution=(8, 8), debug=True, drop_last=True))) == 2


def test_bad_records(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"image": "a.png", "caption": ""}\n')
    with pytest.raises(DataError, match="empty caption"):
        read_manifest(p)
    p.write_text("{not json\n")
    with pytest.raises(DataError, match="invalid JSON"):
        read_manifest(p)
    with pytest.raises(DataError):
        read_manifest(tmp_path / "missing.jsonl")


def test_data_root_env(tmp_path, monkeypatch):
    data = tmp_path / "data"
    data.mkdir()
    _write(data, 2)
    manifest = tmp_path / "elsewhere.jsonl"
    manifest.write_text((data / "m.jsonl").read_text())
    monkeypatch.setenv(DATA_ROOT_ENV, str(data))
    assert len(list(load_pairs(manifest, 2, resolution=(8, 8)))) == 1
    monkeypatch.delenv(DATA_ROOT_ENV)
    with pytest.raises(DataError):
        list(load_pairs(manifest, 2, resolution=(8, 8)))


def test_load_labeled(tmp_path):
    m = _write(tmp_path, 4)
    x, y = load_labeled(m, (4, 4))
    assert x.shape == (4, 3, 4, 4) and y.tolist() == [0, 1, 0, 1]


def test_single_source_passthrough():
    items = list(range(7))
    assert list(uniform_mix([items], [1.0], on_exhausted="stop")) == items


def test_even_mix_proportions():
    mix = uniform_mix([["a"], ["b"]], [0.5, 0.5], seed=3)
    counts = Counter(next(mix) for _ in range(10_000))
    assert 0.48 <= counts["a"] / 10_000 <= 0.52


def test_restart_and_stop():
    mixed = uniform_mix([[1, 2], [10]], [0.5, 0.5], seed=0, with_source=True)
    draws = [next(mixed) for _ in range(50)]
    assert {v for k, v in draws if k == 0} == {1, 2} and {v for k, v in draws if k == 1} == {10}
    stopped = list(uniform_mix([[1, 2], [10]], [0.5, 0.5], seed=0, on_exhausted="stop"))
    assert len(stopped) <= 3
    with pytest.raises(DataError, match="one-shot"):
        list(zip(range(20), uniform_mix([iter([1])], [1.0])))


def test_mix_validation():
    with pytest.raises(ConfigError):
        uniform_mix([[1], [2]], [0.7, 0.7])
    with pytest.raises(ConfigError):
        uniform_mix([[1]], [0.5, 0.5])


def test_source_mix_preset():
    assert FULL_SCALE_MIX_PRESET["downsample"] == {"laion400m": 0.04}
    assert sum(FULL_SCALE_MIX_PRESET["proportions"]) == pytest.approx(1.0)
    assert FULL_SCALE_MIX_PRESET["proportions_are_approximate"] is True


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**31), st.integers(1, 7), st.integers(0, 3))
def test_stream_determinism_property(tmp_path, seed, batch, workers):
    m = tmp_path / "m.jsonl"
    if not m.exists():
        _write(tmp_path, 9)
    a = [c for _, c in load_pairs(m, batch, shuffle_seed=seed, resolution=(8, 8), epochs=2, workers=workers)]
    b = [c for _, c in load_pairs(m, batch, shuffle_seed=seed, resolution=(8, 8), epochs=2, workers=1)]
    assert a == b
    flat = [x for caps in a for x in caps]
    assert sorted(flat[:9]) == sorted(flat[9:]) == sorted(f"caption {i}" for i in range(9))
