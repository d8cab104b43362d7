"""Corpora, split protocol, pair generation, and the on-disk text formats.

All files are line-oriented plain text so they diff cleanly and stay
language neutral. Feature vectors are stored inline (`;`-separated
decimals) or as a relative path to a little-endian float32 flat file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DanglingReferenceError,
    DataError,
    EmptyCorpusError,
    InfeasibleSplitError,
    InsufficientPoolError,
    ParseError,
)
from .va import (
    SigmaProvenance,
    SimilarityScale,
    VAPoint,
    compute_sigma,
    cross_distance_matrix,
    labels_to_array,
    similarity_from_distances,
)

MODALITIES = ("image", "music")
SPLITS = ("train", "val", "test")
PAIR_ORIGINS = ("random", "top", "bottom")

CORPUS_MAGIC = "imemnet-corpus v1"
PAIRS_MAGIC = "imemnet-pairs v1"
SPLITS_MAGIC = "imemnet-splits v1"

# Reserved stream tags so seeded draws for different purposes never collide.
_TAG_SPLIT_IMAGE = 11
_TAG_SPLIT_MUSIC = 12
_TAG_PAIR_CLIP = 21
_TAG_PAIR_SUBSAMPLE = 22
_TAG_SYNTH = 31


@dataclass
class Item:
    """One image or music clip: id, modality, VA label, feature vector."""

    id: str
    modality: str
    label: VAPoint
    features: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r} for item {self.id!r}")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 1:
            raise DataError(f"item {self.id!r} features must be a flat vector")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"item {self.id!r} has non-finite feature entries")


@dataclass
class Corpus:
    images: list[Item]
    music: list[Item]
    image_dim: int
    music_dim: int
    source: str = ""

    def __post_init__(self):
        for items, dim, modality in (
            (self.images, self.image_dim, "image"),
            (self.music, self.music_dim, "music"),
        ):
            seen = set()
            for item in items:
                if item.modality != modality:
                    raise DataError(f"item {item.id!r} listed under wrong modality")
                if item.features.shape[0] != dim:
                    raise DataError(
                        f"item {item.id!r}: feature length {item.features.shape[0]} "
                        f"!= declared {modality} dim {dim}"
                    )
                if item.id in seen:
                    raise DataError(f"duplicate {modality} id {item.id!r}")
                seen.add(item.id)

    def items(self, modality: str) -> list[Item]:
        return self.images if modality == "image" else self.music

    def feature_matrix(self, modality: str) -> np.ndarray:
        items = self.items(modality)
        dim = self.image_dim if modality == "image" else self.music_dim
        if not items:
            return np.zeros((0, dim), dtype=np.float64)
        return np.stack([it.features for it in items])

    def label_matrix(self, modality: str) -> np.ndarray:
        return labels_to_array([it.label for it in self.items(modality)])

    def by_id(self, modality: str) -> dict[str, Item]:
        return {it.id: it for it in self.items(modality)}


@dataclass
class PairRecord:
    """A matched (image, music) pair with its ground-truth similarity."""

    image_id: str
    music_id: str
    similarity: float
    origin: str

    def __post_init__(self):
        if self.origin not in PAIR_ORIGINS:
            raise DataError(f"unknown pair origin {self.origin!r}")
        if not (0.0 < self.similarity <= 1.0):
            raise DataError(
                f"pair ({self.image_id}, {self.music_id}): similarity "
                f"{self.similarity!r} outside (0, 1]"
            )


@dataclass
class PairFile:
    """A pair file's contents: records plus the sigma/seed it was built with."""

    sigma: float
    seed: int
    records: list[PairRecord]


@dataclass
class PairPolicy:
    """How many pairs to form per clip and how to subsample them."""

    images_per_clip: int = 50
    n_random: int = 30
    n_top: int = 10
    n_bottom: int = 10
    sample_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.images_per_clip <= 0:
            raise DataError("images_per_clip must be positive")
        if min(self.n_random, self.n_top, self.n_bottom) < 0:
            raise DataError("pair counts must be nonnegative")
        if self.n_random + self.n_top + self.n_bottom != self.images_per_clip:
            raise DataError(
                f"n_random + n_top + n_bottom = "
                f"{self.n_random + self.n_top + self.n_bottom} "
                f"!= images_per_clip = {self.images_per_clip}"
            )
        if not (0.0 < self.sample_rate <= 1.0):
            raise DataError(f"sample_rate must lie in (0, 1], got {self.sample_rate!r}")


@dataclass
class SplitManifest:
    """Per-split item id lists for both modalities, plus sigma and seeds."""

    ratios: tuple[float, float, float]
    seed: int
    ids: dict[str, dict[str, list[str]]]  # ids[split][modality]
    sigma: SimilarityScale

    def split_ids(self, split: str, modality: str) -> list[str]:
        return self.ids[split][modality]

    def counts(self) -> dict[str, dict[str, int]]:
        return {s: {m: len(self.ids[s][m]) for m in MODALITIES} for s in SPLITS}


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor-based split sizes; the remainder goes to training."""
    n_val = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train = n - n_val - n_test
    return n_train, n_val, n_test


def split_corpus(
    corpus: Corpus,
    ratios: Sequence[float] = (0.80, 0.05, 0.15),
    seed: int = 0,
    sigma_mode: str = "exact",
    sigma_seed: int | None = None,
    sigma_samples: int | None = None,
) -> SplitManifest:
    """Seeded shuffle + contiguous partition per modality, then sigma.

    Sigma is computed on the training-split pools only and reused for
    the validation/test pair labels, so the scale constant never sees
    held-out labels.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0.0 for r in ratios):
        raise InfeasibleSplitError(f"all three ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InfeasibleSplitError(f"ratios must sum to 1, got {ratios}")
    if not corpus.images or not corpus.music:
        raise EmptyCorpusError("cannot split a corpus that is empty in either modality")

    ids: dict[str, dict[str, list[str]]] = {s: {} for s in SPLITS}
    for modality, tag in (("image", _TAG_SPLIT_IMAGE), ("music", _TAG_SPLIT_MUSIC)):
        items = corpus.items(modality)
        n = len(items)
        n_train, n_val, n_test = split_sizes(n, ratios)
        if min(n_train, n_val, n_test) <= 0:
            raise InfeasibleSplitError(
                f"{modality} split sizes {(n_train, n_val, n_test)} include an "
                f"empty split for n={n}, ratios={ratios}"
            )
        perm = np.random.default_rng([seed, tag]).permutation(n)
        order = [items[i].id for i in perm]
        ids["train"][modality] = order[:n_train]
        ids["val"][modality] = order[n_train : n_train + n_val]
        ids["test"][modality] = order[n_train + n_val :]

    by_image = corpus.by_id("image")
    by_music = corpus.by_id("music")
    sigma = compute_sigma(
        [by_image[i].label for i in ids["train"]["image"]],
        [by_music[i].label for i in ids["train"]["music"]],
        mode=sigma_mode,
        seed=sigma_seed,
        sample_count=sigma_samples,
    )
    return SplitManifest(ratios=ratios, seed=int(seed), ids=ids, sigma=sigma)


def generate_pairs(
    images: Sequence[Item],
    music: Sequence[Item],
    policy: PairPolicy,
    scale: SimilarityScale,
) -> list[PairRecord]:
    """The per-clip pair policy: top/bottom extremes plus random picks.

    For each clip, every candidate image is scored by the ground-truth
    similarity. The n_top highest and n_bottom lowest are taken (ties
    broken by ascending image id, bottom picks drawn from the images
    left after the top picks), then n_random distinct images are drawn
    uniformly from the remaining candidates. Finally a seeded uniform
    fraction `sample_rate` of all generated pairs is retained, keeping
    the canonical (clip order; top, bottom, random-by-id) list order.
    """
    n = len(images)
    if n < policy.images_per_clip:
        raise InsufficientPoolError(
            f"{n} candidate images < images_per_clip = {policy.images_per_clip}"
        )
    if not music:
        raise EmptyCorpusError("no music clips to pair")

    img_labels = labels_to_array([it.label for it in images])
    image_ids = [it.id for it in images]
    # Rank of each candidate position in ascending-id order; breaks score ties.
    id_rank = np.empty(n, dtype=np.int64)
    id_rank[sorted(range(n), key=lambda t: image_ids[t])] = np.arange(n)

    pairs: list[PairRecord] = []
    for clip_idx, clip in enumerate(music):
        diff = img_labels - clip.label.as_array()[None, :]
        sims = similarity_from_distances(np.sqrt(np.sum(diff * diff, axis=1)), scale.sigma)

        top_order = np.lexsort((id_rank, -sims))
        top_pick = top_order[: policy.n_top]
        taken = np.zeros(n, dtype=bool)
        taken[top_pick] = True

        bottom_order = np.lexsort((id_rank, sims))
        bottom_pick = [i for i in bottom_order if not taken[i]][: policy.n_bottom]
        taken[bottom_pick] = True

        remaining = np.flatnonzero(~taken)
        rng = np.random.default_rng([policy.seed, _TAG_PAIR_CLIP, clip_idx])
        random_pick = rng.choice(remaining, size=policy.n_random, replace=False)
        random_pick = sorted(random_pick, key=lambda t: image_ids[t])

        for idx_list, origin in ((top_pick, "top"), (bottom_pick, "bottom"), (random_pick, "random")):
            for i in idx_list:
                pairs.append(
                    PairRecord(
                        image_id=image_ids[i],
                        music_id=clip.id,
                        similarity=float(sims[i]),
                        origin=origin,
                    )
                )

    if policy.sample_rate < 1.0:
        keep = int(round(policy.sample_rate * len(pairs)))
        rng = np.random.default_rng([policy.seed, _TAG_PAIR_SUBSAMPLE])
        chosen = np.sort(rng.choice(len(pairs), size=keep, replace=False))
        pairs = [pairs[i] for i in chosen]
    return pairs


def verify_pairs(
    pairs: Iterable[PairRecord],
    corpus: Corpus,
    scale: SimilarityScale,
    tol: float = 1e-9,
) -> None:
    """Check that every stored similarity re-derives from the VA labels."""
    by_image = corpus.by_id("image")
    by_music = corpus.by_id("music")
    for k, p in enumerate(pairs):
        if p.image_id not in by_image:
            raise DanglingReferenceError(f"pair {k}: unknown image id {p.image_id!r}")
        if p.music_id not in by_music:
            raise DanglingReferenceError(f"pair {k}: unknown music id {p.music_id!r}")
        a = by_image[p.image_id].label
        b = by_music[p.music_id].label
        expected = math.exp(-math.hypot(a.valence - b.valence, a.arousal - b.arousal) / scale.sigma)
        if abs(expected - p.similarity) > tol:
            raise DataError(
                f"pair {k} ({p.image_id}, {p.music_id}): stored similarity "
                f"{p.similarity!r} does not re-derive (expected {expected!r})"
            )


def gen_synthetic(
    n_images: int,
    n_music: int,
    image_dim: int,
    music_dim: int,
    noise_std: float = 0.0,
    seed: int = 0,
) -> Corpus:
    """Synthetic corpus: uniform VA labels, features linear in the label.

    Features are a fixed seeded random linear embedding of (valence,
    arousal) into the feature dimension plus Gaussian noise, so with
    noise_std = 0 the labels are exactly recoverable by least squares.
    """
    if image_dim < 2 or music_dim < 2:
        raise DataError("feature dimensions must be at least 2")
    if n_images <= 0 or n_music <= 0:
        raise EmptyCorpusError("synthetic corpus needs positive item counts")
    if noise_std < 0:
        raise DataError("noise_std must be nonnegative")

    def build(modality: str, count: int, dim: int, sub: int) -> list[Item]:
        rng = np.random.default_rng([seed, _TAG_SYNTH, sub])
        labels = rng.uniform(0.0, 1.0, size=(count, 2))
        proj = rng.normal(0.0, 1.0, size=(dim, 2))
        feats = labels @ proj.T
        if noise_std > 0:
            feats = feats + noise_std * rng.normal(0.0, 1.0, size=feats.shape)
        prefix = "img" if modality == "image" else "mus"
        return [
            Item(
                id=f"{prefix}_{i:06d}",
                modality=modality,
                label=VAPoint(float(labels[i, 0]), float(labels[i, 1])),
                features=feats[i],
            )
            for i in range(count)
        ]

    return Corpus(
        images=build("image", n_images, image_dim, 0),
        music=build("music", n_music, music_dim, 1),
        image_dim=image_dim,
        music_dim=music_dim,
        source=f"synthetic seed={seed} noise_std={noise_std!r}",
    )


# ---------------------------------------------------------------------------
# file formats

def _fmt(x: float) -> str:
    return repr(float(x))


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    lines = [f"{CORPUS_MAGIC} image_dim={corpus.image_dim} music_dim={corpus.music_dim}"]
    for items in (corpus.images, corpus.music):
        for it in items:
            feats = ";".join(_fmt(v) for v in it.features)
            lines.append(
                f"{it.modality},{it.id},{_fmt(it.label.valence)},{_fmt(it.label.arousal)},{feats}"
            )
    path.write_text("\n".join(lines) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus manifest {path} does not exist")
    lines = path.read_text().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty corpus manifest")
    header = lines[0].split()
    if " ".join(header[:2]) != CORPUS_MAGIC:
        raise ParseError(path, 1, f"bad corpus header {lines[0]!r}")
    dims = {}
    for tok in header[2:]:
        key, _, value = tok.partition("=")
        if key not in ("image_dim", "music_dim") or not value.isdigit():
            raise ParseError(path, 1, f"bad header field {tok!r}")
        dims[key] = int(value)
    if set(dims) != {"image_dim", "music_dim"}:
        raise ParseError(path, 1, "header must declare image_dim and music_dim")

    images: list[Item] = []
    music: list[Item] = []
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 5:
            raise ParseError(path, line_no, f"expected 5 comma fields, got {len(parts)}")
        modality, item_id, v_str, a_str, payload = parts
        if modality not in MODALITIES:
            raise ParseError(path, line_no, f"unknown modality {modality!r}")
        try:
            label = VAPoint(float(v_str), float(a_str))
        except (ValueError, DataError) as exc:
            raise ParseError(path, line_no, f"bad VA label: {exc}") from exc
        dim = dims["image_dim"] if modality == "image" else dims["music_dim"]
        if ";" in payload or _looks_numeric(payload):
            try:
                feats = np.array([float(tok) for tok in payload.split(";")], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(path, line_no, f"bad inline feature value: {exc}") from exc
        else:
            feat_path = path.parent / payload
            if not feat_path.exists():
                raise ParseError(path, line_no, f"feature file {payload!r} does not exist")
            feats = np.fromfile(feat_path, dtype="<f4").astype(np.float64)
        if feats.shape[0] != dim:
            raise ParseError(
                path, line_no, f"feature length {feats.shape[0]} != declared dim {dim}"
            )
        if not np.all(np.isfinite(feats)):
            raise ParseError(path, line_no, "non-finite feature entries")
        try:
            item = Item(id=item_id, modality=modality, label=label, features=feats)
        except DataError as exc:
            raise ParseError(path, line_no, str(exc)) from exc
        (images if modality == "image" else music).append(item)

    try:
        return Corpus(
            images=images,
            music=music,
            image_dim=dims["image_dim"],
            music_dim=dims["music_dim"],
            source=str(path),
        )
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _looks_numeric(payload: str) -> bool:
    try:
        float(payload)
        return True
    except ValueError:
        return False


def write_pairs(pairs: Sequence[PairRecord], path: str | Path, sigma: float, seed: int) -> None:
    path = Path(path)
    lines = [f"{PAIRS_MAGIC} sigma={_fmt(sigma)} seed={seed}"]
    for p in pairs:
        lines.append(f"{p.image_id},{p.music_id},{_fmt(p.similarity)},{p.origin}")
    path.write_text("\n".join(lines) + "\n")


def read_pairs(path: str | Path) -> PairFile:
    path = Path(path)
    if not path.exists():
        raise DataError(f"pair file {path} does not exist")
    lines = path.read_text().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty pair file")
    header = lines[0].split()
    if " ".join(header[:2]) != PAIRS_MAGIC:
        raise ParseError(path, 1, f"bad pair-file header {lines[0]!r}")
    fields = dict(tok.partition("=")[::2] for tok in header[2:])
    if set(fields) != {"sigma", "seed"}:
        raise ParseError(path, 1, "pair-file header must carry sigma= and seed=")
    try:
        sigma = float(fields["sigma"])
        seed = int(fields["seed"])
    except ValueError as exc:
        raise ParseError(path, 1, f"bad header value: {exc}") from exc

    records = []
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 4:
            raise ParseError(path, line_no, f"expected 4 comma fields, got {len(parts)}")
        image_id, music_id, sim_str, origin = parts
        try:
            record = PairRecord(image_id, music_id, float(sim_str), origin)
        except (ValueError, DataError) as exc:
            raise ParseError(path, line_no, str(exc)) from exc
        records.append(record)
    return PairFile(sigma=sigma, seed=seed, records=records)


def write_split_manifest(manifest: SplitManifest, path: str | Path) -> None:
    path = Path(path)
    r = manifest.ratios
    lines = [
        f"{SPLITS_MAGIC} ratios={_fmt(r[0])}/{_fmt(r[1])}/{_fmt(r[2])} "
        f"sigma={_fmt(manifest.sigma.sigma)} "
        f"sigma_provenance={manifest.sigma.provenance.format()} seed={manifest.seed}"
    ]
    for split in SPLITS:
        for modality in MODALITIES:
            for item_id in manifest.ids[split][modality]:
                lines.append(f"{split},{modality},{item_id}")
    path.write_text("\n".join(lines) + "\n")


def read_split_manifest(path: str | Path, corpus: Corpus | None = None) -> SplitManifest:
    """Load a split manifest; with a corpus, assert the splits partition it."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"split manifest {path} does not exist")
    lines = path.read_text().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty split manifest")
    header = lines[0].split()
    if " ".join(header[:2]) != SPLITS_MAGIC:
        raise ParseError(path, 1, f"bad split-manifest header {lines[0]!r}")
    fields = dict(tok.partition("=")[::2] for tok in header[2:])
    required = {"ratios", "sigma", "sigma_provenance", "seed"}
    if set(fields) != required:
        raise ParseError(path, 1, f"split header must carry {sorted(required)}")
    try:
        ratios = tuple(float(tok) for tok in fields["ratios"].split("/"))
        sigma = SimilarityScale(
            sigma=float(fields["sigma"]),
            provenance=SigmaProvenance.parse(fields["sigma_provenance"]),
        )
        seed = int(fields["seed"])
    except (ValueError, DataError) as exc:
        raise ParseError(path, 1, f"bad header value: {exc}") from exc
    if len(ratios) != 3:
        raise ParseError(path, 1, "ratios must have three components")

    ids: dict[str, dict[str, list[str]]] = {s: {m: [] for m in MODALITIES} for s in SPLITS}
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 3:
            raise ParseError(path, line_no, f"expected 3 comma fields, got {len(parts)}")
        split, modality, item_id = parts
        if split not in SPLITS:
            raise ParseError(path, line_no, f"unknown split {split!r}")
        if modality not in MODALITIES:
            raise ParseError(path, line_no, f"unknown modality {modality!r}")
        ids[split][modality].append(item_id)

    manifest = SplitManifest(ratios=ratios, seed=seed, ids=ids, sigma=sigma)
    for modality in MODALITIES:
        pools = [set(manifest.ids[s][modality]) for s in SPLITS]
        for a in range(3):
            for b in range(a + 1, 3):
                overlap = pools[a] & pools[b]
                if overlap:
                    raise DataError(
                        f"{path}: splits {SPLITS[a]}/{SPLITS[b]} share {modality} "
                        f"ids, e.g. {sorted(overlap)[0]!r}"
                    )
        if corpus is not None:
            union = pools[0] | pools[1] | pools[2]
            corpus_ids = {it.id for it in corpus.items(modality)}
            if union != corpus_ids:
                missing = sorted(corpus_ids ^ union)[:3]
                raise DataError(
                    f"{path}: {modality} splits do not partition the corpus "
                    f"(mismatched ids, e.g. {missing})"
                )
    return manifest
