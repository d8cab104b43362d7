"""Valence-arousal label space.

Labels live in the normalized unit square: valence is pleasantness,
arousal is intensity, both in [0, 1]. The similarity between an image
and a music clip is exp(-d / sigma) where d is the Euclidean distance
between their VA labels and sigma is the mean cross-modal VA distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyCorpusError, InvalidScaleError, OutOfRangeError


@dataclass(frozen=True)
class VAPoint:
    """A valence-arousal coordinate in the normalized unit square."""

    valence: float
    arousal: float

    def __post_init__(self):
        for name, value in (("valence", self.valence), ("arousal", self.arousal)):
            if not (isinstance(value, (int, float)) and math.isfinite(value)):
                raise OutOfRangeError(f"{name} must be a finite number, got {value!r}")
            if not 0.0 <= value <= 1.0:
                raise OutOfRangeError(f"{name} must lie in [0, 1], got {value!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.valence, self.arousal], dtype=np.float64)


@dataclass(frozen=True)
class SigmaProvenance:
    """How a similarity scale was obtained: exact mean or a seeded sample."""

    kind: str  # "exact" | "sampled"
    seed: int | None = None
    sample_count: int | None = None

    def __post_init__(self):
        if self.kind not in ("exact", "sampled"):
            raise InvalidScaleError(f"unknown sigma provenance kind {self.kind!r}")
        if self.kind == "sampled" and (self.seed is None or self.sample_count is None):
            raise InvalidScaleError("sampled sigma provenance needs seed and sample_count")

    def format(self) -> str:
        if self.kind == "exact":
            return "exact"
        return f"sampled:{self.seed}:{self.sample_count}"

    @classmethod
    def parse(cls, text: str) -> "SigmaProvenance":
        if text == "exact":
            return cls("exact")
        parts = text.split(":")
        if len(parts) == 3 and parts[0] == "sampled":
            return cls("sampled", seed=int(parts[1]), sample_count=int(parts[2]))
        raise InvalidScaleError(f"unparsable sigma provenance {text!r}")


@dataclass(frozen=True)
class SimilarityScale:
    """Positive scale constant for the distance-to-similarity map."""

    sigma: float
    provenance: SigmaProvenance

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0.0):
            raise InvalidScaleError(f"sigma must be positive and finite, got {self.sigma!r}")


def normalize_va(raw: float, scale_min: float, scale_max: float) -> float:
    """Map a raw annotation value onto [0, 1] by minimum and range."""
    if not (scale_max > scale_min):
        raise InvalidScaleError(
            f"degenerate annotation scale: min={scale_min!r}, max={scale_max!r}"
        )
    if not (scale_min <= raw <= scale_max):
        raise OutOfRangeError(
            f"value {raw!r} outside annotation scale [{scale_min!r}, {scale_max!r}]"
        )
    return (raw - scale_min) / (scale_max - scale_min)


def va_distance(a: VAPoint, b: VAPoint) -> float:
    """Euclidean distance between two VA labels."""
    return math.hypot(a.valence - b.valence, a.arousal - b.arousal)


def labels_to_array(labels: Sequence[VAPoint]) -> np.ndarray:
    """Stack VA labels into an (n, 2) float64 array."""
    if len(labels) == 0:
        return np.zeros((0, 2), dtype=np.float64)
    return np.array([(p.valence, p.arousal) for p in labels], dtype=np.float64)


def cross_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All pairwise Euclidean distances between rows of (n, 2) and (m, 2)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def compute_sigma(
    image_labels: Sequence[VAPoint],
    music_labels: Sequence[VAPoint],
    mode: str = "exact",
    seed: int | None = None,
    sample_count: int | None = None,
) -> SimilarityScale:
    """Mean cross-modal VA distance over all (or `sample_count` sampled) pairs.

    Exact mode iterates the full n x m product in blocks; per-block sums
    are combined with math.fsum so the result does not depend on the
    block size. Sampled mode draws index pairs uniformly (with
    replacement) from the n x m grid using the given seed and records
    that provenance.
    """
    if len(image_labels) == 0 or len(music_labels) == 0:
        raise EmptyCorpusError("sigma needs non-empty image and music label pools")
    img = labels_to_array(image_labels)
    mus = labels_to_array(music_labels)
    n, m = img.shape[0], mus.shape[0]

    if mode == "exact":
        block = max(1, 2_000_000 // max(m, 1))
        partial = []
        for start in range(0, n, block):
            d = cross_distance_matrix(img[start : start + block], mus)
            partial.append(float(np.sum(d)))
        sigma = math.fsum(partial) / (n * m)
        provenance = SigmaProvenance("exact")
    elif mode == "sampled":
        if seed is None or sample_count is None or sample_count <= 0:
            raise InvalidScaleError("sampled mode needs a seed and a positive sample_count")
        rng = np.random.default_rng([int(seed), 831])  # 831: sigma-sampling stream tag
        i = rng.integers(0, n, size=sample_count)
        j = rng.integers(0, m, size=sample_count)
        diff = img[i] - mus[j]
        sigma = float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))
        provenance = SigmaProvenance("sampled", seed=int(seed), sample_count=int(sample_count))
    else:
        raise InvalidScaleError(f"unknown sigma mode {mode!r}")

    if sigma <= 0.0:
        raise InvalidScaleError(
            "all-identical labels give sigma = 0; the similarity scale must be positive"
        )
    return SimilarityScale(sigma=sigma, provenance=provenance)


def similarity(d: float, scale: SimilarityScale) -> float:
    """Distance-to-similarity map exp(-d / sigma), in (0, 1]."""
    if d < 0.0:
        raise OutOfRangeError(f"distance must be nonnegative, got {d!r}")
    return math.exp(-d / scale.sigma)


def similarity_from_distances(d: np.ndarray, sigma: float) -> np.ndarray:
    """Vectorized exp(-d / sigma) for nonnegative distance arrays."""
    return np.exp(-d / sigma)
