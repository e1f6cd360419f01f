"""Toy world generation, dataset round trips, and triplet sampling."""

from pathlib import Path

import numpy as np
import pytest

from dissim.datasets import (
    PROBS_MAGIC,
    load_dataset,
    read_probs,
    save_dataset,
    synth_dataset,
    tree_hash,
    write_probs,
)
from dissim.errors import InputError, SamplingExhausted
from dissim.patches import (
    AugmentParams,
    Patch,
    PatchOrigin,
    PatchPool,
    SyntheticImage,
    augment,
    augment_with_params,
    build_triplets,
    extract_patches,
    plan_layout,
    sample_negative,
    semantic_difference,
    undo_flips,
)
from dissim.seeding import derive_seed, rng
from dissim.toyworld import (
    corrupt_prediction,
    default_class_set,
    generate_scene,
    inject_ood,
    render_from_labels,
)


# ---------------------------------------------------------------- toy world

def test_generate_scene_is_valid_and_deterministic():
    cs = default_class_set()
    a = generate_scene(123, cs, 64, 64, 5, patch_size=32, image_id="s")
    b = generate_scene(123, cs, 64, 64, 5, patch_size=32, image_id="s")
    a.validate(cs)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.rgb, b.rgb)
    # scenes are in-distribution until OoD injection
    assert not a.ood_mask.any()
    assert set(np.unique(a.labels)) <= set(cs.in_dist_ids)


def test_inject_ood_adds_ood_pixels():
    cs = default_class_set()
    scene = generate_scene(5, cs, 64, 64, 4, patch_size=32, image_id="s")
    seeded = inject_ood(scene, cs, 17, n_ood=2)
    seeded.validate(cs)
    assert seeded.ood_mask.any()
    ood_ids = set(np.unique(seeded.labels[seeded.ood_mask]))
    assert ood_ids <= set(cs.ood_ids)


def test_corrupt_prediction_rate_zero_touches_only_ood():
    cs = default_class_set()
    scene = generate_scene(9, cs, 64, 64, 5, patch_size=32, image_id="s")
    scene = inject_ood(scene, cs, 2, n_ood=1)
    pred, probs = corrupt_prediction(scene.labels, 0.0, 3, cs)
    in_dist = ~cs.ood_mask(scene.labels)
    assert np.array_equal(pred[in_dist], scene.labels[in_dist])
    # OoD pixels must be remapped: no OoD id survives in the prediction
    assert not cs.ood_mask(pred).any()
    assert probs.shape == scene.labels.shape + (len(cs.prob_channel_ids),)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_corrupt_prediction_hits_requested_rate():
    cs = default_class_set()
    scene = generate_scene(21, cs, 128, 128, 6, patch_size=32, image_id="s")
    rate = 0.3
    pred, probs = corrupt_prediction(scene.labels, rate, 11, cs)
    changed = float((pred != scene.labels).mean())
    assert 0.2 <= changed <= 0.4
    # rewritten pixels keep probability mass on the true class, so the
    # entropy baseline has signal there
    flipped = pred != scene.labels
    ent = -(probs * np.log(np.maximum(probs, 1e-12))).sum(axis=-1)
    assert ent[flipped].mean() > ent[~flipped].mean()


def test_corrupt_prediction_rejects_bad_rate():
    cs = default_class_set()
    scene = generate_scene(1, cs, 64, 64, 3, patch_size=32, image_id="s")
    with pytest.raises(InputError):
        corrupt_prediction(scene.labels, 1.5, 0, cs)


def test_render_from_labels_matches_palette_on_flat_regions():
    cs = default_class_set()
    labels = np.full((32, 32), cs.background_id, dtype=np.uint8)
    rgb = render_from_labels(labels, cs, seed=0, noise_level=0.0)
    assert rgb.dtype == np.uint8 and rgb.shape == (32, 32, 3)
    expected = np.asarray(cs.palette[cs.background_id], dtype=np.int32)
    err = np.abs(rgb.astype(np.int32) - expected).max()
    assert err <= 16  # texture amplitude stays small against palette colors


# ----------------------------------------------------------------- datasets

def test_dataset_round_trip(tmp_path, tiny_dataset):
    out = save_dataset(tiny_dataset.images, tiny_dataset.class_set, tmp_path / "copy", seed=99)
    loaded = load_dataset(out)
    assert len(loaded) == len(tiny_dataset)
    for a, b in zip(tiny_dataset.images, loaded.images):
        assert a.id == b.id
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.pred_labels, b.pred_labels)
        np.testing.assert_allclose(a.pred_probs, b.pred_probs, atol=1e-6)


def test_save_dataset_refuses_nonempty_target(tmp_path, tiny_dataset):
    target = tmp_path / "occupied"
    target.mkdir()
    (target / "junk").write_text("x")
    with pytest.raises(InputError):
        save_dataset(tiny_dataset.images, tiny_dataset.class_set, target, seed=0)


def test_probs_round_trip_and_magic(tmp_path):
    r = rng(5)
    raw = r.random((8, 6, 4)).astype(np.float32)
    probs = raw / raw.sum(axis=-1, keepdims=True)
    path = tmp_path / "p.twpb"
    write_probs(path, probs)
    assert path.read_bytes()[: len(PROBS_MAGIC)] == PROBS_MAGIC
    back = read_probs(path, 8, 6, 4)
    np.testing.assert_array_equal(back, probs)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(InputError):
        read_probs(path, 8, 6, 4)


def test_tree_hash_flags_any_byte_change(tmp_path):
    d = tmp_path / "t"
    (d / "sub").mkdir(parents=True)
    (d / "a.txt").write_text("alpha")
    (d / "sub" / "b.bin").write_bytes(b"\x00\x01")
    h1 = tree_hash(d)
    assert h1 == tree_hash(d)
    (d / "sub" / "b.bin").write_bytes(b"\x00\x02")
    assert tree_hash(d) != h1


def test_synth_dataset_counts_and_manifest(tmp_path):
    out, counts = synth_dataset(tmp_path / "ds", n=4, seed=3, ood_rate=1.0,
                                corrupt_rate=0.0, size=64, patch_size=32)
    ds = load_dataset(out)
    assert len(ds) == 4
    assert ds.manifest["n_images"] == "4"
    assert ds.manifest["ood_rate"] == "1.0"
    total = sum(counts.values())
    assert total == 4 * 64 * 64
    ood_pixels = sum(c for cid, c in counts.items() if ds.class_set.is_ood(cid))
    assert ood_pixels > 0


# ------------------------------------------------------------------ patches

def test_plan_layout_crops_remainders():
    layout = plan_layout(100, 130, 32)
    assert (layout.rows, layout.cols) == (3, 4)
    assert (layout.cropped_rows, layout.cropped_cols) == (4, 2)
    assert layout.origin_of(5) == (32, 32)
    with pytest.raises(InputError):
        layout.origin_of(12)


def test_extract_patches_matches_layout():
    img = rng(2).random((96, 128, 3))
    patches, layout = extract_patches(img, 32)
    assert len(patches) == layout.n_patches == 12
    row, col = layout.origin_of(7)
    np.testing.assert_array_equal(patches[7], img[row:row + 32, col:col + 32])


@pytest.mark.parametrize(
    "a, b, expected",
    [
        (np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8), 0.0),
        (np.zeros((4, 4), np.uint8), np.ones((4, 4), np.uint8), 1.0),
        (np.zeros((2, 2), np.uint8), np.array([[0, 0], [1, 1]], np.uint8), 0.5),
    ],
)
def test_semantic_difference_hand_cases(a, b, expected):
    assert semantic_difference(a, b) == expected


def _patch(labels, origin=PatchOrigin("im", 0, 0), source="synthetic"):
    rgb = np.zeros(labels.shape + (3,), dtype=np.float32)
    return Patch(rgb=rgb, labels=labels, origin=origin, source=source)


def test_patch_validation_errors():
    labels = np.zeros((8, 8), dtype=np.uint8)
    with pytest.raises(InputError):
        _patch(labels, origin=PatchOrigin("im", 3, 0))  # unaligned origin
    with pytest.raises(InputError):
        _patch(labels, source="other")
    with pytest.raises(InputError):
        Patch(rgb=np.full((8, 8, 3), 2.0, np.float32), labels=labels,
              origin=PatchOrigin("im", 0, 0), source="real")


def test_augment_flips_are_undone_exactly():
    r = rng(8)
    labels = r.integers(0, 5, size=(16, 16)).astype(np.uint8)
    rgb = r.random((16, 16, 3)).astype(np.float32)
    patch = Patch(rgb=rgb, labels=labels, origin=PatchOrigin("im", 0, 0), source="synthetic")
    params = AugmentParams(brightness=0.1, contrast=1.1, hflip=True, vflip=True)
    out = augment_with_params(patch, params)
    assert out.augmented == params
    np.testing.assert_array_equal(undo_flips(out), labels)
    assert float(out.rgb.min()) >= 0.0 and float(out.rgb.max()) <= 1.0


def test_augment_is_seed_deterministic():
    labels = np.zeros((16, 16), dtype=np.uint8)
    patch = _patch(labels)
    a = augment(patch, seed=4)
    b = augment(patch, seed=4)
    assert a.augmented == b.augmented
    np.testing.assert_array_equal(a.rgb, b.rgb)


def _synthetic_pool(n_images, size, fill_ids):
    images = []
    for i, fill in zip(range(n_images), fill_ids):
        labels = np.full((size, size), fill, dtype=np.uint8)
        rgb = np.zeros((size, size, 3), dtype=np.float32)
        images.append(SyntheticImage(rgb=rgb, labels=labels, id=f"im-{i}"))
    return images


def test_sample_negative_respects_gate_and_origin():
    pool = PatchPool(_synthetic_pool(3, 32, [0, 1, 2]), 16)
    anchor = pool.get(0, 0)
    neg = sample_negative(anchor, pool, tau=0.5, seed=0)
    assert neg.origin != anchor.origin
    assert semantic_difference(anchor.labels, undo_flips(neg)) >= 0.5


def test_sample_negative_exhausts_on_uniform_pool():
    pool = PatchPool(_synthetic_pool(2, 32, [3, 3]), 16)
    anchor = pool.get(0, 0)
    with pytest.raises(SamplingExhausted) as exc:
        sample_negative(anchor, pool, tau=0.5, seed=0, max_tries=16)
    assert exc.value.best_difference == 0.0


def test_pool_needs_two_images():
    with pytest.raises(InputError):
        PatchPool(_synthetic_pool(1, 32, [0]), 16)


def _aligned_pairs(dataset, generator_seed=0):
    cs = dataset.class_set
    synth = []
    for i, im in enumerate(dataset.images):
        rgb = render_from_labels(im.pred_labels, cs, derive_seed(generator_seed, i),
                                 noise_level=0.0)
        synth.append(SyntheticImage(rgb=rgb.astype(np.float32) / 255.0,
                                    labels=im.pred_labels.copy(), id=im.id))
    return synth


def test_build_triplets_validates_and_reproduces(tiny_dataset):
    synth = _aligned_pairs(tiny_dataset)
    triplets, skipped = build_triplets(tiny_dataset.images, synth, 32, 0.5, seed=1)
    assert triplets, "expected at least one accepted triplet"
    assert len(triplets) + skipped == sum(
        plan_layout(im.height, im.width, 32).n_patches for im in tiny_dataset.images
    )
    for t in triplets[:32]:
        t.validate(tau=0.5)
    again, _ = build_triplets(tiny_dataset.images, synth, 32, 0.5, seed=1)
    assert [t.negative.origin for t in again] == [t.negative.origin for t in triplets]


def test_build_triplets_rejects_misaligned_inputs(tiny_dataset):
    synth = _aligned_pairs(tiny_dataset)
    with pytest.raises(InputError):
        build_triplets(tiny_dataset.images, synth[:-1], 32, 0.5, seed=0)
    renamed = [SyntheticImage(rgb=s.rgb, labels=s.labels, id="other") for s in synth]
    with pytest.raises(InputError):
        build_triplets(tiny_dataset.images, renamed, 32, 0.5, seed=0)
