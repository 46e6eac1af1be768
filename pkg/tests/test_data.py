import json
from collections import Counter

import numpy as np
import pytest

from msp_reid.data import (CLOTH_PALETTE, Dataset, SyntheticConfig, generate_synthetic_dataset,
                           load_directory_dataset, pk_sample, write_directory_dataset)
from msp_reid.errors import ConfigurationError, DataError, FormatError
from msp_reid.masks import derive_masks
from msp_reid.structures import HairstyleLabel


def test_two_identity_factor_isolation():
    ds = generate_synthetic_dataset(SyntheticConfig(2, 1, 1, 1, noise_std=0.0, seed=1))
    assert len(ds) == 2
    a, b = ds
    assert a.clothes != b.clothes and a.identity != b.identity
    fa = a.image[derive_masks(a.semantic_map).face == 1].mean(axis=0)
    fb = b.image[derive_masks(b.semantic_map).face == 1].mean(axis=0)
    assert np.abs(fa - fb).max() > 16


def test_same_seed_bit_identical():
    cfg = SyntheticConfig(3, 2, 2, 2, seed=9)
    a, b = generate_synthetic_dataset(cfg), generate_synthetic_dataset(cfg)
    assert all(x == y for x, y in zip(a, b))
    assert a[0].image.tobytes() == b[0].image.tobytes()


def test_region_colour_oracle():
    cfg = SyntheticConfig(4, 2, 3, 1, noise_std=0.0, seed=2)
    ds = generate_synthetic_dataset(cfg)
    by_combo = {}
    for s in ds:
        m = derive_masks(s.semantic_map)
        hair = s.image[m.hair == 1]
        assert hair.std(axis=0).max() < 1e-9      # a single hair color per image
        by_combo.setdefault((s.identity, s.hairstyle), set()).add(tuple(hair.mean(axis=0).round()))
        pants = s.image[s.semantic_map.labels == 9].mean(axis=0)
        assert np.abs(CLOTH_PALETTE - pants).sum(axis=1).min() < 1e-9
    assert all(len(v) == 1 for v in by_combo.values())


def test_face_colour_classifier_is_perfect_without_noise():
    ds = generate_synthetic_dataset(SyntheticConfig(12, 2, 2, 2, noise_std=0.0, seed=4))
    feats = np.array([s.image[derive_masks(s.semantic_map).face == 1].mean(axis=0) for s in ds])
    ids = np.array([s.identity for s in ds])
    centroids = np.array([feats[ids == i].mean(axis=0) for i in range(12)])
    pred = np.argmin(((feats[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == ids).all()


def test_hairstyles_and_splits():
    cfg = SyntheticConfig(6, 2, 3, 3, seed=0, num_test_identities=2)
    ds = generate_synthetic_dataset(cfg)
    assert {s.hairstyle for s in ds} == {HairstyleLabel.SHORT, HairstyleLabel.MEDIUM, HairstyleLabel.LONG}
    test_ids = {s.identity for s in ds if s.split != "train"}
    assert test_ids == {4, 5}
    assert Counter(s.split for s in ds if s.identity in test_ids) == {"query": 12, "gallery": 24}
    assert ds.positive_clothes_map()[5] == [10, 11]


@pytest.mark.parametrize("bad", [dict(num_identities=0), dict(noise_std=-1), dict(image_size=(32, 16)),
                                 dict(hairstyles_per_identity=4), dict(num_test_identities=8)])
def test_config_errors(bad):
    with pytest.raises(ConfigurationError):
        SyntheticConfig(**bad)


def test_pk_examples(rng):
    labels = [0, 0, 0, 1, 1, 2, 2, 2, 3, 3]
    batches = pk_sample(labels, 2, 2, rng)
    assert len(batches) == 2
    seen = set()
    for b in batches:
        assert len(b) == 4
        c = Counter(labels[i] for i in b)
        assert len(c) == 2 and set(c.values()) == {2}
        seen |= set(c)
    assert seen == {0, 1, 2, 3}
    big = pk_sample(np.repeat(np.arange(8), 20), 4, 16, rng)
    assert all(len(b) == 64 for b in big)
    rep = pk_sample([0, 0, 0, 1], 1, 4, rng)
    for b in rep:
        assert len(b) == 4 and len({labels[i] for i in b}) == 1
    with pytest.raises(ConfigurationError):
        pk_sample(labels, 5, 2, rng)


def test_directory_round_trip(tmp_path):
    ds = generate_synthetic_dataset(SyntheticConfig(2, 2, 2, 1, seed=5, num_test_identities=1))
    write_directory_dataset(ds, tmp_path)
    back = load_directory_dataset(tmp_path)
    assert len(back) == len(ds) and all(a == b for a, b in zip(ds, back))
    rec = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert {"file", "identity", "clothes", "hairstyle", "camera"} <= set(rec)


def test_directory_errors(tmp_path):
    with pytest.raises(FormatError):
        load_directory_dataset(tmp_path)
    (tmp_path / "manifest.jsonl").write_text("")
    assert len(load_directory_dataset(tmp_path)) == 0
    (tmp_path / "manifest.jsonl").write_text(json.dumps(
        {"file": "nope.png", "identity": 0, "clothes": 0, "hairstyle": "short", "camera": 0}) + "\n")
    with pytest.raises(DataError, match="nope.png"):
        load_directory_dataset(tmp_path)
    (tmp_path / "manifest.jsonl").write_text('{"file": "x.png"}\n')
    with pytest.raises(FormatError):
        load_directory_dataset(tmp_path)


def test_mask_dim_mismatch(tmp_path):
    from msp_reid.masks import SemanticMap, write_semantic_map

    ds = generate_synthetic_dataset(SyntheticConfig(1, 1, 1, 1))
    write_directory_dataset(ds, tmp_path)
    write_semantic_map(tmp_path / "masks" / f"{ds[0].sample_id}.png", SemanticMap(np.zeros((5, 5))))
    with pytest.raises(DataError, match="masks"):
        load_directory_dataset(tmp_path)


def test_dataset_helpers(tiny_dataset):
    assert isinstance(tiny_dataset.subset("query"), Dataset)
    assert len(tiny_dataset.identities) == len(tiny_dataset)
