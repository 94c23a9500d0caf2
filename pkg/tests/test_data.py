from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from gaitfusion.data import (MANIFEST, DatasetIndex, IndexEntry, SamplerConfig, SequenceStore,
                             check_separability, clip_indices, load_batch, load_index, sample_batch,
                             scan_dataset, synth_generate, synth_sequences)
from gaitfusion.errors import ConfigError
from gaitfusion.preprocess import preprocess_sequence


def write_tree(root, ids=2, conds=("nm",), views=("000", "090"), frames=5, skip_depth=()):
    for i in range(ids):
        for c in conds:
            for v in views:
                rel = f"{i:03d}/{c}/{v}"
                for kind in ("sils", "depth"):
                    if kind == "depth" and rel in skip_depth:
                        continue
                    d = root / kind / rel
                    d.mkdir(parents=True)
                    for f in range(frames):
                        Image.fromarray(np.full((4, 4), 255, np.uint8)).save(d / f"{f:03d}.png")


def fake_index(counts):
    """counts: {subject: [nframes, ...]}"""
    return DatasetIndex([IndexEntry(s, f"c{j}", "000", f"{s}/c{j}/000", n)
                         for s, ns in counts.items() for j, n in enumerate(ns)])


def test_scan_enumerates(tmp_path):
    write_tree(tmp_path)
    index = scan_dataset(tmp_path)
    assert len(index) == 4
    assert all(e.nframes == 5 for e in index)
    assert [e.key for e in index] == sorted(e.key for e in index)


def test_scan_skips_missing_depth(tmp_path, caplog):
    write_tree(tmp_path, skip_depth=("001/nm/090",))
    index = scan_dataset(tmp_path)
    assert len(index) == 3 and index.skipped == 1


def test_scan_empty_root(tmp_path):
    with pytest.raises(ConfigError):
        scan_dataset(tmp_path)
    (tmp_path / "sils").mkdir()
    with pytest.raises(ConfigError):
        scan_dataset(tmp_path)


def test_rescan_identical_and_manifest(tmp_path):
    write_tree(tmp_path)
    a, b = scan_dataset(tmp_path).to_manifest(), scan_dataset(tmp_path).to_manifest()
    assert a == b
    assert a.splitlines()[0] == "000\tnm\t000\t000/nm/000\t5"
    load_index(tmp_path)
    assert (tmp_path / MANIFEST).read_text() == a
    assert DatasetIndex.from_manifest(a).entries == scan_dataset(tmp_path).entries


def test_sample_deterministic():
    index = fake_index({f"s{i}": [12, 15, 9] for i in range(5)})
    cfg = SamplerConfig(3, 2, 8)
    a, b = sample_batch(index, cfg, 42), sample_batch(index, cfg, 42)
    assert a.entries == b.entries and a.subjects == b.subjects
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))


def test_short_sequence_wraps():
    np.testing.assert_array_equal(clip_indices(10, 30, np.random.default_rng(0)),
                                  np.tile(np.arange(10), 3))


def test_batch_arithmetic():
    index = fake_index({f"s{i}": [40] * 20 for i in range(9)})
    b = sample_batch(index, SamplerConfig(8, 16, 30), 0)
    assert len(b.entries) == 128
    counts = Counter(b.subjects)
    assert len(counts) == 8 and set(counts.values()) == {16}
    assert [b.subjects[i * 16] for i in range(8)] == [b.subjects[i * 16 + 15] for i in range(8)]


def test_sampler_errors():
    with pytest.raises(ConfigError):
        SamplerConfig(1, 4, 10)
    with pytest.raises(ConfigError):
        SamplerConfig(2, 2, 0)
    with pytest.raises(ConfigError):
        sample_batch(fake_index({"a": [5], "b": [5]}), SamplerConfig(3, 2, 4), 0)


def test_discard_policy_drops_short_sequences():
    index = fake_index({"a": [3, 20], "b": [20], "c": [2]})
    b = sample_batch(index, SamplerConfig(2, 2, 10, "discard"), 0)
    assert "c" not in b.subjects
    assert all(index.entries[e].nframes >= 10 for e in b.entries)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), lengths=st.lists(st.integers(1, 40), min_size=1, max_size=4),
       n_subj=st.integers(2, 5), k=st.integers(2, 5), clip_len=st.integers(1, 35))
def test_sampling_properties(seed, lengths, n_subj, k, clip_len):
    index = fake_index({f"s{i}": lengths for i in range(n_subj)})
    p = min(n_subj, 3)
    b = sample_batch(index, SamplerConfig(p, k, clip_len), seed)
    counts = Counter(b.subjects)
    assert len(counts) == p and set(counts.values()) == {k}
    for e, frames, subj in zip(b.entries, b.frames, b.subjects):
        n = index.entries[e].nframes
        assert index.entries[e].subject == subj
        assert len(frames) == clip_len
        assert frames.min() >= 0 and frames.max() < n
        if n >= clip_len:  # contiguous window inside the sequence
            assert np.array_equal(frames, np.arange(frames[0], frames[0] + clip_len))


def test_synth_counts_and_determinism(tmp_path):
    synth_generate(tmp_path / "a", ids=3, seqs_per_id=4, frames=5, seed=9)
    synth_generate(tmp_path / "b", ids=3, seqs_per_id=4, frames=5, seed=9)
    index = scan_dataset(tmp_path / "a")
    assert len(index) == 12 and sum(e.nframes for e in index) == 60
    assert {e.condition.split("-")[0] for e in index} == {"nm", "bg"}
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
    assert files_a == files_b and len(files_a) == 120
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synth_full_size_counts():
    seqs = list(synth_sequences(8, 4, 30, 0))
    assert len(seqs) == 32 and sum(len(s[3]) for s in seqs) == 960


def test_synth_frames_are_valid_preprocess_inputs():
    for subject, cond, view, frames in synth_sequences(3, 2, 6, 1):
        pairs, dropped = preprocess_sequence(frames)
        assert dropped == 0 and len(pairs) == 6
        for sil, dep in frames:
            assert set(np.unique(sil)) <= {0, 255}
            assert (dep[sil > 0] > 0).all() and (dep[sil == 0] == 0).all()


def test_synth_separability():
    frames = {}
    for subject, cond, view, fr in synth_sequences(8, 2, 10, 0):
        frames[(subject, len([k for k in frames if k[0] == subject]))] = [s for s, _ in fr]
    assert check_separability(frames) >= 0.9


def test_separability_check_rejects_clones():
    sil = np.zeros((8, 8), np.uint8)
    sil[2:6, 3:5] = 255
    with pytest.raises(ConfigError):
        check_separability({("a", 0): [sil] * 4, ("b", 0): [sil] * 4})


def test_store_and_load_batch(tiny_dataset):
    index = load_index(tiny_dataset)
    store = SequenceStore(tiny_dataset, index)
    s, d = store[0]
    assert s.shape == (6, 64, 44) and s.dtype == np.float32
    assert set(np.unique(s)) <= {0.0, 1.0}
    assert d.min() >= 0 and d.max() <= 1
    b = sample_batch(index, SamplerConfig(2, 2, 9), 0)
    sils, deps = load_batch(store, b)
    assert sils.shape == deps.shape == (4, 1, 9, 64, 44)
