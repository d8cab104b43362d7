import numpy as np
import pytest

from cdcml.dataset import Corpus, Item, PairPolicy, generate_pairs, split_corpus
from cdcml.trainer import SplitData
from cdcml.va import VAPoint


def make_item(item_id, modality, v, a, features):
    return Item(
        id=item_id,
        modality=modality,
        label=VAPoint(v, a),
        features=np.asarray(features, dtype=np.float64),
    )


@pytest.fixture
def tiny_corpus():
    """8 images, 3 clips, 3-d features; labels spread over the unit square."""
    rng = np.random.default_rng(99)
    images = [
        make_item(f"img_{i}", "image", v, a, rng.normal(size=3))
        for i, (v, a) in enumerate(
            [(0.1, 0.1), (0.2, 0.8), (0.35, 0.4), (0.5, 0.55),
             (0.6, 0.2), (0.75, 0.9), (0.9, 0.35), (0.95, 0.7)]
        )
    ]
    music = [
        make_item(f"mus_{j}", "music", v, a, rng.normal(size=4))
        for j, (v, a) in enumerate([(0.15, 0.25), (0.5, 0.5), (0.85, 0.75)])
    ]
    return Corpus(images=images, music=music, image_dim=3, music_dim=4, source="fixture")


def build_split_data(corpus, split_seed=0, policy=None):
    """Split a corpus and generate per-split pairs, returning SplitData."""
    manifest = split_corpus(corpus, seed=split_seed)
    policy = policy or PairPolicy(
        images_per_clip=8, n_random=4, n_top=2, n_bottom=2, sample_rate=1.0, seed=3
    )
    by_image = corpus.by_id("image")
    by_music = corpus.by_id("music")
    pairs = {}
    for split in ("train", "val", "test"):
        images = [by_image[i] for i in manifest.split_ids(split, "image")]
        music = [by_music[i] for i in manifest.split_ids(split, "music")]
        pairs[split] = generate_pairs(images, music, policy, manifest.sigma)
    return manifest, SplitData.build(corpus, manifest, pairs)
