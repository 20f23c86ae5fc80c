"""Synthetic corpus: determinism, mask geometry, allocation and manifest math."""

import zlib

import numpy as np
import pytest

from lmad.dataset import (
    CATEGORIES,
    VOCAB_WORDS,
    DatasetManifest,
    PointCloudSample,
    _allocate_counts,
    _bottle_patches,
    build_manifest,
    generate_sample,
    partial_view,
    sample_seed,
    stable_hash,
    view_seed_for,
)
from lmad.pointnet import normalize_cloud


def test_generation_is_deterministic():
    a = generate_sample("mug", seed=42, n_points=128)
    b = generate_sample("mug", seed=42, n_points=128)
    assert a.coords.tobytes() == b.coords.tobytes()
    for (wa, ma), (wb, mb) in zip(a.affordances, b.affordances):
        assert wa == wb
        assert ma.tobytes() == mb.tobytes()


def test_different_seeds_differ():
    a = generate_sample("mug", seed=1, n_points=128)
    b = generate_sample("mug", seed=2, n_points=128)
    assert a.coords.tobytes() != b.coords.tobytes()


@pytest.mark.parametrize("category", CATEGORIES)
def test_masks_are_pairwise_disjoint(category):
    s = generate_sample(category, seed=9, n_points=256)
    masks = [m for _, m in s.affordances]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            assert not np.any(masks[i] & masks[j])


@pytest.mark.parametrize("category", CATEGORIES)
def test_every_sample_carries_all_words_and_support_is_empty(category):
    s = generate_sample(category, seed=5, n_points=64)
    assert [w for w, _ in s.affordances] == list(VOCAB_WORDS)
    assert s.mask_for("support").sum() == 0
    # every category affords grasping somewhere
    assert s.mask_for("grasp").sum() > 0


def test_coords_are_unit_sphere_normalized():
    for category in CATEGORIES:
        s = generate_sample(category, seed=3, n_points=128)
        radii = np.linalg.norm(s.coords.astype(np.float64), axis=1)
        assert radii.max() == pytest.approx(1.0, abs=1e-5)
        np.testing.assert_allclose(s.coords.mean(axis=0), 0.0, atol=1e-5)


def test_allocation_largest_remainder():
    # areas 50/30/20 over 7 points: raw 3.5/2.1/1.4 -> floors 3/2/1, the
    # leftover point goes to the largest remainder (0.5).
    counts = _allocate_counts(7, np.array([50.0, 30.0, 20.0]))
    assert counts.tolist() == [4, 2, 1]
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(1, 6))
        areas = rng.uniform(0.1, 5.0, k)
        n = int(rng.integers(1, 400))
        c = _allocate_counts(n, areas)
        assert c.sum() == n
        assert (c >= 0).all()
        # never more than one point away from the exact share
        assert np.abs(c - areas / areas.sum() * n).max() < 1.0 + 1e-9


def test_mask_population_tracks_patch_area():
    n = 512
    areas = np.array([area for _, area, _ in _bottle_patches()])
    counts = _allocate_counts(n, areas)
    s = generate_sample("bottle", seed=21, n_points=n)
    # patch order: body_side, neck_side, top_disk, ...
    assert s.mask_for("wrap-grasp").sum() == counts[0]
    assert s.mask_for("grasp").sum() == counts[1]
    assert s.mask_for("contain").sum() == counts[2]


def test_generate_sample_validation():
    with pytest.raises(ValueError, match="unknown category"):
        generate_sample("teapot", seed=0)
    with pytest.raises(ValueError, match="n_points"):
        generate_sample("mug", seed=0, n_points=32)


def test_sample_validation():
    coords = np.zeros((4, 3), dtype=np.float32)
    with pytest.raises(ValueError, match=r"\(N, 3\)"):
        PointCloudSample(coords=np.zeros((4, 2)), category="mug", affordances=[])
    with pytest.raises(ValueError, match="duplicate"):
        PointCloudSample(coords=coords, category="mug",
                         affordances=[("a", np.zeros(4)), ("a", np.zeros(4))])
    with pytest.raises(ValueError, match="shape"):
        PointCloudSample(coords=coords, category="mug",
                         affordances=[("a", np.zeros(3))])
    with pytest.raises(ValueError, match="non-binary"):
        PointCloudSample(coords=coords, category="mug",
                         affordances=[("a", np.full(4, 2))])
    assert PointCloudSample(coords=coords, category="mug",
                            affordances=[]).mask_for("a") is None


# ---------------------------------------------------------------------------
# partial views
# ---------------------------------------------------------------------------

def test_partial_view_matches_reference_construction():
    s = generate_sample("hat", seed=13, n_points=256)
    view_seed = view_seed_for("hat_0000.afpc")
    got = partial_view(s, view_seed)

    coords = s.coords.astype(np.float64)
    n = coords.shape[0]
    rng = np.random.default_rng(view_seed)
    v = rng.normal(size=3)
    v = v / np.linalg.norm(v)
    proj = (coords - coords.mean(axis=0)) @ v
    threshold = np.sort(proj)[int(np.floor(0.3 * n))]
    keep = np.flatnonzero(proj > threshold)
    extra = rng.integers(0, keep.size, size=n - keep.size)
    idx = np.concatenate([keep, keep[extra]])

    np.testing.assert_array_equal(
        got.coords, normalize_cloud(coords[idx]).astype(np.float32))
    for word, mask in s.affordances:
        np.testing.assert_array_equal(got.mask_for(word), mask[idx])


def test_partial_view_survivor_count():
    # distinct projections: exactly N - floor(0.3 N) - 1 unique points survive
    for n in (64, 100, 256):
        s = generate_sample("knife", seed=n, n_points=n)
        got = partial_view(s, view_seed=77)
        assert got.n_points == n
        expected_survivors = n - int(np.floor(0.3 * n)) - 1
        uniq = np.unique(got.coords, axis=0).shape[0]
        assert uniq == expected_survivors


def test_partial_view_is_deterministic():
    s = generate_sample("bottle", seed=4, n_points=64)
    a = partial_view(s, 123)
    b = partial_view(s, 123)
    assert a.coords.tobytes() == b.coords.tobytes()
    assert partial_view(s, 124).coords.tobytes() != a.coords.tobytes()


def test_partial_view_degenerate_cloud_raises():
    coords = np.ones((64, 3), dtype=np.float32)  # all projections equal
    s = PointCloudSample(coords=coords, category="mug", affordances=[])
    with pytest.raises(ValueError, match="partial view keeps only"):
        partial_view(s, 1)


# ---------------------------------------------------------------------------
# seeds and manifest
# ---------------------------------------------------------------------------

def test_stable_hash_is_crc32():
    assert stable_hash("bottle:0") == zlib.crc32(b"bottle:0")
    assert sample_seed(7, "mug", 3) == 7 + zlib.crc32(b"mug:3")
    assert view_seed_for("x.afpc") == zlib.crc32(b"x.afpc:view")


def test_build_manifest_split_arithmetic(tmp_path):
    manifest = build_manifest(tmp_path, per_category=10, n_points=64, seed=5)
    assert len(manifest.samples) == 40
    assert len(manifest.splits["train"]) == 28
    assert len(manifest.splits["val"]) == 4
    assert len(manifest.splits["test"]) == 8
    # per-category contiguous blocks: 7 train, 1 val, 2 test
    assert manifest.splits["train"][:7] == list(range(0, 7))
    assert manifest.splits["val"][:1] == [7]
    assert manifest.splits["test"][:2] == [8, 9]
    all_idx = sorted(i for split in manifest.splits.values() for i in split)
    assert all_idx == list(range(40))
    assert manifest.generator == {"n_points": 64, "per_category": 10, "seed": 5}
    assert (tmp_path / "manifest.json").exists()
    for name in manifest.samples:
        assert (tmp_path / name).exists()


def test_build_manifest_regeneration_is_byte_identical(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    build_manifest(a_dir, per_category=10, n_points=64, seed=1)
    build_manifest(b_dir, per_category=10, n_points=64, seed=1)
    for name in sorted(p.name for p in a_dir.iterdir()):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()


def test_build_manifest_minimum_size(tmp_path):
    with pytest.raises(ValueError, match="minimum is 10"):
        build_manifest(tmp_path, per_category=4)


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest(affordances=["a"], samples=["s.afpc"],
                        splits={"train": [0], "val": [], "test": []},
                        generator={"seed": 9})
    path = tmp_path / "m.json"
    m.save(path)
    again = DatasetManifest.load(path)
    assert again == m
    again.save(tmp_path / "m2.json")
    assert (tmp_path / "m2.json").read_bytes() == path.read_bytes()
