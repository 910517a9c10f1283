import numpy as np
import pytest

from doda.config import CorpusConfig, content_hash
from doda.errors import ConfigError, EmptyDatasetError
from doda.synthbench import (
    DEFAULT_DOMAINS,
    UNLABELED_SPLIT,
    DomainSpec,
    build_corpus,
    default_plans,
    gen_scene,
    load_specs,
    load_split,
    mask_box,
    mean_hue,
    validate_specs,
)

SMALL = CorpusConfig(labeled=8, unlabeled=20, target_pool=4, target_test=4, train_domains=[0, 1], target_domain=4)


def test_scene_is_reproducible():
    a = gen_scene(DEFAULT_DOMAINS[0], np.random.default_rng(3))
    b = gen_scene(DEFAULT_DOMAINS[0], np.random.default_rng(3))
    np.testing.assert_array_equal(a.image, b.image)
    assert a.layout == b.layout


def test_boxes_are_tight_around_masks():
    sample = gen_scene(DEFAULT_DOMAINS[2], np.random.default_rng(0))
    assert sample.image.min() >= 0 and sample.image.max() <= 1
    assert len(sample.layout) == len(sample.masks)
    for box, mask in zip(sample.layout.boxes, sample.masks):
        assert box == mask_box(mask)
        assert mask[int(box.y_min):int(box.y_max), int(box.x_min):int(box.x_max)].sum() == mask.sum()


def test_domains_differ_in_hue():
    rng = np.random.default_rng(1)
    h0 = np.mean([mean_hue(gen_scene(DEFAULT_DOMAINS[0], rng).image) for _ in range(10)])
    h2 = np.mean([mean_hue(gen_scene(DEFAULT_DOMAINS[2], rng).image) for _ in range(10)])
    assert abs(h0 - h2) > 0.1


def test_spec_validation():
    with pytest.raises(ConfigError):
        DomainSpec(0, bg_hue=(0.5, 0.4))
    with pytest.raises(ConfigError):
        DomainSpec(0, density=(3, 1))
    with pytest.raises(ConfigError):
        validate_specs([DomainSpec(1), DomainSpec(1)])


def test_plans_need_enough_unlabeled_images():
    with pytest.raises(ConfigError):
        default_plans(CorpusConfig(labeled=10, unlabeled=12, target_pool=4))


def test_corpus_layout_and_determinism(tmp_path):
    plans = default_plans(SMALL)
    maps = build_corpus(tmp_path / "a", DEFAULT_DOMAINS, plans, seed=11, image_size=16)
    build_corpus(tmp_path / "b", DEFAULT_DOMAINS, plans, seed=11, image_size=16)
    assert content_hash(tmp_path / "a") == content_hash(tmp_path / "b")
    assert len(maps["train"]) == 8
    assert set(maps["train"].values()) == {0, 1}
    assert set(maps["target_test"].values()) == {4}
    assert set(maps["train"]) <= set(maps[UNLABELED_SPLIT])
    assert set(maps["target_pool"]) <= set(maps[UNLABELED_SPLIT])
    assert len(maps[UNLABELED_SPLIT]) == SMALL.unlabeled


def test_load_split(tmp_path):
    build_corpus(tmp_path, DEFAULT_DOMAINS, default_plans(SMALL), seed=0, image_size=16)
    train = load_split(tmp_path, "train")
    assert len(train) == 8
    assert all(s.layout is not None and s.image.shape == (16, 16, 3) for s in train)
    pool = load_split(tmp_path, "target_pool", with_images=False)
    assert all(s.layout is None and s.image is None and s.domain_id == 4 for s in pool)
    assert load_specs(tmp_path) == list(DEFAULT_DOMAINS)
    with pytest.raises(EmptyDatasetError):
        load_split(tmp_path, "nonexistent")


def test_different_seeds_give_different_corpora(tmp_path):
    plans = default_plans(SMALL)
    build_corpus(tmp_path / "a", DEFAULT_DOMAINS, plans, seed=1, image_size=16)
    build_corpus(tmp_path / "b", DEFAULT_DOMAINS, plans, seed=2, image_size=16)
    assert content_hash(tmp_path / "a" / "train") != content_hash(tmp_path / "b" / "train")
