from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairattack import synthdata as sd


def test_identity_latent_deterministic():
    a = sd.make_identity(3, 7)
    b = sd.make_identity(3, 7)
    c = sd.make_identity(3, 8)
    d = sd.make_identity(4, 7)
    assert np.array_equal(a.latent, b.latent)
    assert not np.array_equal(a.latent, c.latent)
    assert not np.array_equal(a.latent, d.latent)
    assert a.latent.shape == (sd.LATENT_DIM,)


def test_render_deterministic_bytes():
    spec = sd.make_identity(0, 2)
    a = sd.render(spec, sd.LIVE, 123)
    b = sd.render(spec, sd.LIVE, 123)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    c = sd.render(spec, sd.LIVE, 124)
    assert a.pixels.tobytes() != c.pixels.tobytes()


def test_render_shape_range_and_labels():
    spec = sd.make_identity(1, 0)
    for liveness in (sd.LIVE, sd.SPOOF):
        img = sd.render(spec, liveness, 5)
        assert img.pixels.shape == sd.IMG_SHAPE
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
        assert img.liveness == liveness
        assert img.identity_id == 0
    with pytest.raises(ValueError, match="liveness"):
        sd.render(spec, "replay", 5)


def test_live_spoof_mean_abs_gap():
    # measured over 100 seeded samples; the renderer constants must keep
    # the spoof overlay visible after clamping
    rng = np.random.default_rng(99)
    diffs = []
    for _ in range(100):
        ident = int(rng.integers(0, 50))
        seed = int(rng.integers(0, 2**31))
        nseed = int(rng.integers(0, 2**31))
        spec = sd.make_identity(seed, ident)
        live = sd.render(spec, sd.LIVE, nseed)
        spoof = sd.render(spec, sd.SPOOF, nseed)
        diffs.append(float(np.abs(live.pixels - spoof.pixels).mean()))
    assert min(diffs) > 0.02, f"weakest live/spoof gap {min(diffs):.4f}"


def test_gen_corpus_counts_and_splits():
    c = sd.gen_corpus(seed=0, n_identities=10, images_per=5)
    assert len(c.entries) == 10 * 2 * 5
    assert set(c.train_identities) & set(c.eval_identities) == set()
    assert sorted(c.train_identities + c.eval_identities) == list(range(10))
    for e in c.entries:
        expected = "train" if e.identity_id in c.train_identities else "eval"
        assert e.split == expected


def test_gen_corpus_pairs_cross_identity_spoof_to_live():
    c = sd.gen_corpus(seed=1, n_identities=8, images_per=3)
    assert len(c.eval_pairs) == 4 * 3 * 3 * 3  # a!=b ordered, cross image product
    for s_idx, t_idx in c.eval_pairs:
        src, tgt = c.entries[s_idx], c.entries[t_idx]
        assert src.liveness == sd.SPOOF and tgt.liveness == sd.LIVE
        assert src.split == "eval" and tgt.split == "eval"
        assert src.identity_id != tgt.identity_id


def test_gen_corpus_rejects_small():
    with pytest.raises(ValueError, match="4"):
        sd.gen_corpus(seed=0, n_identities=3, images_per=5)
    with pytest.raises(ValueError):
        sd.gen_corpus(seed=0, n_identities=8, images_per=0)


def test_corpus_roundtrip_bytes(tmp_path):
    c = sd.gen_corpus(seed=5, n_identities=6, images_per=2)
    d1 = tmp_path / "a"
    d2 = tmp_path / "b"
    sd.save_corpus(c, str(d1))
    sd.save_corpus(sd.gen_corpus(seed=5, n_identities=6, images_per=2), str(d2))
    assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()
    assert (d1 / "images.bin").read_bytes() == (d2 / "images.bin").read_bytes()

    back = sd.load_corpus(str(d1))
    assert back.eval_pairs == c.eval_pairs
    assert back.train_identities == c.train_identities
    for e0, e1 in zip(c.entries, back.entries):
        assert e0.pixels.tobytes() == e1.pixels.tobytes()
        assert (e0.identity_id, e0.liveness, e0.noise_seed, e0.split) == (
            e1.identity_id,
            e1.liveness,
            e1.noise_seed,
            e1.split,
        )


def test_load_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        sd.load_corpus(str(tmp_path / "nope"))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10, deadline=None)
def test_prop_corpus_determinism_and_disjointness(seed):
    a = sd.gen_corpus(seed=seed, n_identities=6, images_per=2)
    b = sd.gen_corpus(seed=seed, n_identities=6, images_per=2)
    assert a.eval_pairs == b.eval_pairs
    assert all(
        x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(a.entries, b.entries)
    )
    assert set(a.train_identities).isdisjoint(a.eval_identities)
