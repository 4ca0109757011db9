# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Tests for mpnn_mcp_server.pipeline.datasets."""

import itertools

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from mpnn_mcp_server.errors import DatasetError, ShapeMismatchError
from mpnn_mcp_server.pipeline.datasets import (
    CUP,
    DISC,
    ChannelStats,
    load_riga_split,
    majority_vote,
    parse_rater,
    preprocess,
    resize_mask,
    synth_generate,
    write_image,
    write_mask,
    write_riga_layout,
)
from mpnn_mcp_server.pipeline.mpggd import dsc_m


def m(rows):
    return np.array(rows, dtype=np.uint8)


def write_sample(directory, stem, image, **masks):
    directory.mkdir(parents=True, exist_ok=True)
    write_image(directory / f"{stem}_image.png", image)
    for name, mask in masks.items():
        write_mask(directory / f"{stem}_{name}.png", mask)


@pytest.fixture
def riga_root(tmp_path, rng):
    """Two sources, two raters each, 20×20 images."""
    root = tmp_path / "riga"
    for source in ("BinRushed", "Magrabia"):
        for stem in ("b", "a"):
            image = rng.integers(0, 256, size=(20, 20, 3)).astype(np.uint8)
            label = np.zeros((20, 20), dtype=np.uint8)
            label[5:15, 5:15] = DISC
            label[8:12, 8:12] = CUP
            other = label.copy()
            other[5, 5:15] = 0
            write_sample(root / source, stem, image, rater1=label, rater2=other)
    return root


# ==============================
# Fusion and resizing
# ==============================


def test_majority_vote_examples():
    assert majority_vote([m([[1, 1]]), m([[1, 2]]), m([[2, 2]])]).tolist() == [[1, 2]]
    # ties go to the lower class
    assert majority_vote([m([[0, 2]]), m([[1, 1]])]).tolist() == [[0, 1]]
    assert majority_vote([m([[2, 0]])]).tolist() == [[2, 0]]


def test_majority_vote_matches_counting_oracle(rng):
    for _ in range(200):
        r = int(rng.integers(1, 7))
        masks = [rng.integers(0, 3, size=(3, 4)).astype(np.uint8) for _ in range(r)]
        fused = majority_vote(masks)
        for y, x in itertools.product(range(3), range(4)):
            votes = [int(mask[y, x]) for mask in masks]
            counts = [votes.count(c) for c in range(3)]
            assert fused[y, x] == counts.index(max(counts))


def test_majority_vote_ignores_rater_order(rng):
    masks = [rng.integers(0, 3, size=(5, 5)).astype(np.uint8) for _ in range(4)]
    reference = majority_vote(masks)
    for order in itertools.permutations(masks):
        assert np.array_equal(majority_vote(list(order)), reference)


def test_majority_vote_errors():
    with pytest.raises(DatasetError):
        majority_vote([])
    with pytest.raises(ShapeMismatchError):
        majority_vote([m([[0, 1]]), m([[0], [1]])])
    with pytest.raises(DatasetError):
        majority_vote([m([[0, 3]])])


def test_resize_mask_keeps_label_alphabet(rng):
    mask = rng.integers(0, 3, size=(37, 41)).astype(np.uint8)
    resized = resize_mask(mask, 16)
    assert resized.shape == (16, 16)
    assert set(np.unique(resized)) <= {0, 1, 2}
    assert np.array_equal(resize_mask(mask[:16, :16], 16), mask[:16, :16])


def test_parse_rater():
    assert parse_rater(1) == 1
    assert parse_rater("rater3") == 3
    assert parse_rater("majority-vote") == "majority"
    assert parse_rater("clean") == "clean"
    with pytest.raises(DatasetError):
        parse_rater("rater0")
    with pytest.raises(DatasetError):
        parse_rater("best")


# ==============================
# Preprocessing
# ==============================


def test_preprocess_standardizes_each_channel(rng):
    raw = rng.integers(0, 256, size=(40, 30, 3)).astype(np.uint8)
    out = preprocess(raw, 32)
    assert out.shape == (32, 32, 3) and out.dtype == np.float32
    assert np.allclose(out.reshape(-1, 3).mean(axis=0), 0.0, atol=1e-5)
    assert np.allclose(out.reshape(-1, 3).std(axis=0), 1.0, atol=1e-4)


def test_preprocess_identity_stats_only_scales(rng):
    raw = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
    identity = ChannelStats((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    assert np.allclose(preprocess(raw, 8, identity), raw / 255.0, atol=1e-7)


def test_preprocess_rejects_constant_and_malformed_images():
    with pytest.raises(DatasetError):
        preprocess(np.full((8, 8, 3), 128, dtype=np.uint8), 8)
    with pytest.raises(DatasetError):
        preprocess(np.zeros((0, 8, 3), dtype=np.uint8), 8)
    with pytest.raises(DatasetError):
        preprocess(np.zeros((8, 8), dtype=np.uint8), 8)


def test_channel_stats_roundtrip(tmp_path):
    stats = ChannelStats((0.1, 0.2, 0.3), (0.5, 0.25, 0.125))
    stats.save(tmp_path / "stats.json")
    assert ChannelStats.load(tmp_path / "stats.json") == stats


# ==============================
# RIGA layout
# ==============================


def test_load_riga_split_ids_and_shapes(riga_root):
    dataset, stats = load_riga_split(riga_root, rater=1, side=16)
    assert dataset.ids == ["BinRushed_a", "BinRushed_b", "Magrabia_a", "Magrabia_b"]
    image, label, index = dataset[0]
    assert image.shape == (3, 16, 16) and label.shape == (16, 16) and index == 0
    assert len(stats.mean) == 3


def test_load_riga_split_sources_and_frozen_stats(riga_root):
    train, stats = load_riga_split(riga_root, sources=["BinRushed"], side=16)
    test, same = load_riga_split(riga_root, sources=["Magrabia"], side=16, stats=stats)
    assert same is stats
    assert train.ids == ["BinRushed_a", "BinRushed_b"]
    assert test.ids == ["Magrabia_a", "Magrabia_b"]
    with pytest.raises(DatasetError):
        load_riga_split(riga_root, sources=["Nowhere"])


def test_load_riga_split_majority_vote(riga_root):
    first, _ = load_riga_split(riga_root, rater=1, side=20)
    fused, _ = load_riga_split(riga_root, rater="majority-vote", side=20)
    # two raters disagree on row 5: the tie resolves to background
    assert first.samples[0].label[5, 10] == DISC
    assert fused.samples[0].label[5, 10] == 0
    assert fused.samples[0].label[10, 10] == CUP


def test_load_riga_split_missing_mask(riga_root):
    with pytest.raises(DatasetError, match="missing mask"):
        load_riga_split(riga_root, rater=3)


def test_load_riga_split_bad_label_values(tmp_path, rng):
    source = tmp_path / "root" / "src"
    source.mkdir(parents=True)
    write_image(source / "x_image.png", rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8))
    Image.fromarray(np.full((8, 8), 7, dtype=np.uint8)).save(source / "x_rater1.png")
    with pytest.raises(DatasetError, match="outside"):
        load_riga_split(tmp_path / "root", side=8)


def test_load_riga_split_empty_directory(tmp_path):
    (tmp_path / "empty" / "src").mkdir(parents=True)
    with pytest.raises(DatasetError, match="no samples found"):
        load_riga_split(tmp_path / "empty")
    with pytest.raises(DatasetError):
        load_riga_split(tmp_path / "missing")


def test_with_labels_swaps_masks_only(synth_pair):
    noisy, clean = synth_pair
    relabeled = noisy.with_labels({s.id: s.label for s in clean.samples})
    assert relabeled.ids == noisy.ids
    for a, b, c in zip(relabeled.samples, noisy.samples, clean.samples):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.label, c.label)
    with pytest.raises(DatasetError, match="missing mask"):
        noisy.with_labels({})


# ==============================
# Synthetic data
# ==============================


def test_synth_without_noise_labels_are_exact():
    noisy, clean = synth_generate(seed=1, count=5, side=32, boundary_noise=0.0)
    for a, b in zip(noisy.samples, clean.samples):
        assert np.array_equal(a.label, b.label)
        assert np.array_equal(a.image, b.image)


def test_synth_is_deterministic():
    a, _ = synth_generate(seed=7, count=3, side=32, boundary_noise=0.3)
    b, _ = synth_generate(seed=7, count=3, side=32, boundary_noise=0.3)
    c, _ = synth_generate(seed=8, count=3, side=32, boundary_noise=0.3)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.samples, b.samples))
    assert all(np.array_equal(x.label, y.label) for x, y in zip(a.samples, b.samples))
    assert not np.array_equal(a.samples[0].image, c.samples[0].image)
    assert a.ids == ["synth00000", "synth00001", "synth00002"]


def test_synth_images_do_not_depend_on_noise_level():
    quiet, _ = synth_generate(seed=2, count=2, side=32, boundary_noise=0.0)
    loud, _ = synth_generate(seed=2, count=2, side=32, boundary_noise=1.0)
    assert np.array_equal(quiet.samples[1].image, loud.samples[1].image)


def test_synth_cup_lies_inside_disc():
    _, clean = synth_generate(seed=3, count=10, side=64, boundary_noise=0.3)
    for sample in clean.samples:
        cup = sample.label == CUP
        disc_region = sample.label > 0
        assert cup.any() and (sample.label == DISC).any()
        # the cup never touches the background
        assert not (ndimage.binary_dilation(cup) & ~disc_region).any()


def test_synth_noisy_labels_stay_close_to_clean():
    noisy, clean = synth_generate(seed=0, count=20, side=64, boundary_noise=0.3)
    score = np.mean([dsc_m(a.label, b.label) for a, b in zip(noisy.samples, clean.samples)])
    assert score == pytest.approx(0.9527, abs=2e-3)


def test_synth_full_bias_over_traces_the_disc_only():
    unbiased, _ = synth_generate(seed=5, count=4, side=64, boundary_noise=0.3)
    noisy, clean = synth_generate(seed=5, count=4, side=64, boundary_noise=0.3, boundary_bias=1.0)
    for a, b, c in zip(noisy.samples, clean.samples, unbiased.samples):
        assert np.array_equal(a.image, c.image)
        assert np.array_equal(a.label == CUP, b.label == CUP)
        traced, exact = a.label > 0, b.label > 0
        assert not (exact & ~traced).any()
        assert traced.sum() > exact.sum()


def test_synth_bias_keeps_members_reachable():
    noisy, clean = synth_generate(
        seed=0, count=20, side=64, boundary_noise=0.3, boundary_bias=0.7
    )
    score = np.mean([dsc_m(a.label, b.label) for a, b in zip(noisy.samples, clean.samples)])
    assert 0.92 < score < 0.99


def test_synth_rejects_invalid_arguments():
    with pytest.raises(DatasetError):
        synth_generate(seed=0, count=0, side=32, boundary_noise=0.1)
    with pytest.raises(DatasetError):
        synth_generate(seed=0, count=1, side=16, boundary_noise=0.1)
    with pytest.raises(DatasetError):
        synth_generate(seed=0, count=1, side=32, boundary_noise=1.5)
    with pytest.raises(DatasetError):
        synth_generate(seed=0, count=1, side=32, boundary_noise=0.1, boundary_bias=-0.2)


def test_written_layout_loads_back(tmp_path):
    noisy, clean = synth_generate(seed=4, count=3, side=32, boundary_noise=0.3)
    write_riga_layout(tmp_path / "data" / "train", noisy, clean)
    loaded, _ = load_riga_split(tmp_path / "data", rater="clean", side=32)
    assert loaded.ids == [f"train_{i}" for i in noisy.ids]
    for sample, original in zip(loaded.samples, clean.samples):
        assert np.array_equal(sample.label, original.label)
