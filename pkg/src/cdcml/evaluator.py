"""Metrics, report shaping, baselines, the ablation runner, and top-k matching.

`evaluate` is duck-typed over anything exposing `predict_similarity`
and `predict_va`, which is how the full model, the separate-prediction
baseline, and the label-lookup oracle all share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from . import losses as L
from .dataset import Corpus
from .errors import DataError, EmptyCorpusError
from .nn import (
    ModelParams,
    Network,
    apply_sgd,
    branch_specs,
    lr_at,
    predictor_specs,
)
from .trainer import (
    SplitData,
    TrainConfig,
    TrainHistory,
    _stream_seed,
    make_batches,
    train,
)
from .va import SimilarityScale

_TAG_SP_IMG = 201
_TAG_SP_MUS = 202
_TAG_CONCAT_VA = 203
_TAG_DROP_VA = 204


def mse(preds: Sequence[float], labels: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"mse length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise DataError("mse of empty input")
    d = t - p
    return float(np.mean(d * d))


def mae(preds: Sequence[float], labels: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"mae length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise DataError("mae of empty input")
    return float(np.mean(np.abs(t - p)))


EVAL_METRIC_FIELDS = (
    "sim_mse",
    "sim_mae",
    "image_v_mse",
    "image_v_mae",
    "image_a_mse",
    "image_a_mae",
    "music_v_mse",
    "music_v_mae",
    "music_a_mse",
    "music_a_mae",
)


@dataclass
class EvalReport:
    """Similarity and per-dimension VA metrics for one split."""

    split: str
    n_pairs: int
    n_images: int
    n_music: int
    sim_mse: float
    sim_mae: float
    image_v_mse: float
    image_v_mae: float
    image_a_mse: float
    image_a_mae: float
    music_v_mse: float
    music_v_mae: float
    music_a_mse: float
    music_a_mae: float

    @staticmethod
    def csv_header(extra: Sequence[str] = ()) -> str:
        return ",".join([*extra, "split", "n_pairs", *EVAL_METRIC_FIELDS])

    def csv_row(self, extra: Sequence[str] = ()) -> str:
        cells = [*extra, self.split, str(self.n_pairs)]
        cells += [repr(getattr(self, f)) for f in EVAL_METRIC_FIELDS]
        return ",".join(cells)

    def to_text(self) -> str:
        lines = [
            f"split = {self.split}",
            f"n_pairs = {self.n_pairs}",
            f"n_images = {self.n_images}",
            f"n_music = {self.n_music}",
        ]
        lines += [f"{f} = {getattr(self, f)!r}" for f in EVAL_METRIC_FIELDS]
        return "\n".join(lines) + "\n"


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    """Fieldwise mean of the metric fields; counts must agree."""
    if not reports:
        raise DataError("cannot average zero reports")
    first = reports[0]
    means = {
        f: float(np.mean([getattr(r, f) for r in reports])) for f in EVAL_METRIC_FIELDS
    }
    return replace(first, **means)


def evaluate(model, data: SplitData, split: str, chunk: int = 1024) -> EvalReport:
    """Eval-mode forward over all split pairs and items."""
    if split not in data.pairs:
        raise DataError(f"no pairs loaded for split {split!r}")
    pairs = data.pairs[split]
    items = data.items[split]

    preds = []
    for start in range(0, len(pairs), chunk):
        sel = slice(start, start + chunk)
        img_x = items["image"].features[pairs.image_rows[sel]]
        mus_x = items["music"].features[pairs.music_rows[sel]]
        preds.append(model.predict_similarity(img_x, mus_x))
    pred = np.concatenate(preds) if preds else np.zeros(0)

    va: dict[str, np.ndarray] = {}
    for modality in ("image", "music"):
        va[modality] = model.predict_va(items[modality].features, modality)

    img_labels = items["image"].labels
    mus_labels = items["music"].labels
    return EvalReport(
        split=split,
        n_pairs=len(pairs),
        n_images=img_labels.shape[0],
        n_music=mus_labels.shape[0],
        sim_mse=mse(pred, pairs.similarity),
        sim_mae=mae(pred, pairs.similarity),
        image_v_mse=mse(va["image"][:, 0], img_labels[:, 0]),
        image_v_mae=mae(va["image"][:, 0], img_labels[:, 0]),
        image_a_mse=mse(va["image"][:, 1], img_labels[:, 1]),
        image_a_mae=mae(va["image"][:, 1], img_labels[:, 1]),
        music_v_mse=mse(va["music"][:, 0], mus_labels[:, 0]),
        music_v_mae=mae(va["music"][:, 0], mus_labels[:, 0]),
        music_a_mse=mse(va["music"][:, 1], mus_labels[:, 1]),
        music_a_mae=mae(va["music"][:, 1], mus_labels[:, 1]),
    )


class OracleModel:
    """Ground-truth lookup model: predicts the true VA label of every item
    and the exact distance-to-similarity value for every pair. Useful as
    an independent reference for evaluation and ranking code."""

    def __init__(self, corpus: Corpus, scale: SimilarityScale):
        self.scale = scale
        self._labels: dict[bytes, np.ndarray] = {}
        for modality in ("image", "music"):
            for item in corpus.items(modality):
                self._labels[item.features.tobytes()] = item.label.as_array()

    def _lookup(self, feats: np.ndarray) -> np.ndarray:
        rows = []
        for row in np.asarray(feats, dtype=np.float64):
            key = row.tobytes()
            if key not in self._labels:
                raise DataError("oracle model saw features of an unknown item")
            rows.append(self._labels[key])
        return np.array(rows).reshape(len(rows), 2)

    def predict_va(self, feats: np.ndarray, modality: str) -> np.ndarray:
        return self._lookup(feats)

    def predict_similarity(self, img_feats: np.ndarray, mus_feats: np.ndarray) -> np.ndarray:
        diff = self._lookup(img_feats) - self._lookup(mus_feats)
        return np.exp(-np.sqrt(np.sum(diff * diff, axis=1)) / self.scale.sigma)


@dataclass
class SPNetModel:
    """Separate-prediction baseline: two independent VA stacks; pair
    similarity is derived by the distance-to-similarity map, never learned."""

    image_branch: Network
    image_va: Network
    music_branch: Network
    music_va: Network
    sigma: float

    def predict_va(self, feats: np.ndarray, modality: str) -> np.ndarray:
        branch = self.image_branch if modality == "image" else self.music_branch
        head = self.image_va if modality == "image" else self.music_va
        emb, _ = branch.forward(feats, mode="eval")
        out, _ = head.forward(emb, mode="eval")
        return out

    def predict_similarity(self, img_feats: np.ndarray, mus_feats: np.ndarray) -> np.ndarray:
        diff = self.predict_va(img_feats, "image") - self.predict_va(mus_feats, "music")
        return np.exp(-np.sqrt(np.sum(diff * diff, axis=1)) / self.sigma)


def _train_va_stack(
    branch: Network,
    head: Network,
    feats: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    tag: int,
) -> None:
    """SGD over items with the VA regression loss only (in place)."""
    n = feats.shape[0]
    for epoch in range(config.epochs):
        lr = lr_at(config.optimizer, epoch)
        for b_idx, batch in enumerate(
            make_batches(n, config.batch_size, [config.seed, tag, epoch])
        ):
            x = feats[batch]
            y = labels[batch]
            emb, branch_cache = branch.forward(x, mode="train")
            out, head_cache = head.forward(
                emb,
                mode="train",
                dropout_seed=_stream_seed(config.seed, tag, epoch, b_idx, _TAG_DROP_VA),
            )
            report = L.va_mse_loss(out, y, modality="image")
            d_emb, head_grads = head.backward(head_cache, report.grads[L.GRAD_IMG_VA_PRED])
            _, branch_grads = branch.backward(branch_cache, d_emb)
            apply_sgd(branch, branch_grads, lr)
            apply_sgd(head, head_grads, lr)


def baseline_sp(data: SplitData, config: TrainConfig, split: str = "test") -> tuple[SPNetModel, EvalReport]:
    """Train two independent VA stacks, derive pair similarity from the
    predicted VA points with the manifest sigma."""
    arch = config.arch

    def net(specs, sub):
        return Network(specs, seed=_stream_seed(config.seed, 42, sub))

    model = SPNetModel(
        image_branch=net(branch_specs(data.image_dim, arch), 0),
        image_va=net(
            predictor_specs(arch.embed_dim, arch.va_hidden, 2, arch.va_dropout), 1
        ),
        music_branch=net(branch_specs(data.music_dim, arch), 2),
        music_va=net(
            predictor_specs(arch.embed_dim, arch.va_hidden, 2, arch.va_dropout), 3
        ),
        sigma=data.sigma.sigma,
    )
    train_items = data.items["train"]
    _train_va_stack(
        model.image_branch,
        model.image_va,
        train_items["image"].features,
        train_items["image"].labels,
        config,
        _TAG_SP_IMG,
    )
    _train_va_stack(
        model.music_branch,
        model.music_va,
        train_items["music"].features,
        train_items["music"].labels,
        config,
        _TAG_SP_MUS,
    )
    return model, evaluate(model, data, split)


def baseline_concat(
    data: SplitData, config: TrainConfig, split: str = "test"
) -> tuple[ModelParams, TrainHistory, EvalReport]:
    """Concat-regressor baseline: branches + similarity head trained with
    the similarity MSE loss only, then the VA head trained on frozen
    embeddings."""
    stage1 = replace(
        config,
        loss=L.LossConfig.from_ablation_flags(
            sim=True, va=False, cfr=False, cfm=False, sfr=False
        ),
        mode="full",
    )
    model, history = train(data, stage1)

    # Stage 2: branches frozen; embeddings are constants, so precompute them.
    train_items = data.items["train"]
    embs = []
    labels = []
    for modality in ("image", "music"):
        emb = model.embed(train_items[modality].features, modality)
        embs.append(emb)
        labels.append(train_items[modality].labels)
    feats = np.concatenate(embs, axis=0)
    targets = np.concatenate(labels, axis=0)
    head = model.va_predictor
    n = feats.shape[0]
    for epoch in range(config.epochs):
        lr = lr_at(config.optimizer, epoch)
        for b_idx, batch in enumerate(
            make_batches(n, config.batch_size, [config.seed, _TAG_CONCAT_VA, epoch])
        ):
            out, cache = head.forward(
                feats[batch],
                mode="train",
                dropout_seed=_stream_seed(
                    config.seed, _TAG_CONCAT_VA, epoch, b_idx, _TAG_DROP_VA
                ),
            )
            report = L.va_mse_loss(out, targets[batch], modality="image")
            _, grads = head.backward(cache, report.grads[L.GRAD_IMG_VA_PRED])
            apply_sgd(head, grads, lr)
    return model, history, evaluate(model, data, split)


ABLATION_FLAGS = ("sim", "va", "cfr", "cfm", "sfr")


@dataclass
class AblationRow:
    """One loss-toggle configuration and its seed-averaged metrics."""

    flags: dict[str, bool]
    report: EvalReport
    per_seed: list[EvalReport]

    def label(self) -> str:
        return "+".join(f for f in ABLATION_FLAGS if self.flags[f]) or "none"


TABLE3_ROWS: tuple[dict[str, bool], ...] = (
    dict(sim=True, va=False, cfr=False, cfm=False, sfr=False),
    dict(sim=True, va=False, cfr=True, cfm=False, sfr=False),
    dict(sim=True, va=False, cfr=True, cfm=True, sfr=False),
    dict(sim=True, va=True, cfr=False, cfm=False, sfr=False),
    dict(sim=True, va=True, cfr=True, cfm=True, sfr=True),
)


def run_ablation(
    data: SplitData,
    rows: Sequence[dict[str, bool]],
    seeds: Sequence[int],
    base_config: TrainConfig,
    split: str = "test",
) -> list[AblationRow]:
    """Train one model per (row, seed) with identical data and batching
    seeds, differing only in the loss toggles; report per-row means."""
    if not rows:
        raise DataError("ablation needs at least one row")
    if not seeds:
        raise DataError("ablation needs at least one seed")
    out = []
    for flags in rows:
        unknown = set(flags) - set(ABLATION_FLAGS)
        if unknown:
            raise DataError(f"unknown ablation flags {sorted(unknown)}")
        loss_cfg = L.LossConfig.from_ablation_flags(
            **{f: bool(flags.get(f, False)) for f in ABLATION_FLAGS}
        )
        reports = []
        for seed in seeds:
            cfg = replace(base_config, seed=int(seed), loss=loss_cfg, mode="full")
            model, _ = train(data, cfg)
            reports.append(evaluate(model, data, split))
        out.append(
            AblationRow(
                flags={f: bool(flags.get(f, False)) for f in ABLATION_FLAGS},
                report=mean_report(reports),
                per_seed=reports,
            )
        )
    return out


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    lines = [EvalReport.csv_header(extra=ABLATION_FLAGS)]
    for row in rows:
        flags = ["1" if row.flags[f] else "0" for f in ABLATION_FLAGS]
        lines.append(row.report.csv_row(extra=flags))
    return "\n".join(lines) + "\n"


def match_topk(
    model,
    music_features: np.ndarray,
    image_ids: Sequence[str],
    image_features: np.ndarray,
    k: int,
) -> list[tuple[str, float]]:
    """Rank the image pool against one clip by predicted similarity,
    descending; ties break by ascending image id."""
    pool = len(image_ids)
    if pool == 0:
        raise EmptyCorpusError("empty image pool")
    if not 1 <= k <= pool:
        raise DataError(f"k must lie in [1, {pool}], got {k}")
    mus = np.asarray(music_features, dtype=np.float64).reshape(1, -1)
    sims = model.predict_similarity(
        np.asarray(image_features, dtype=np.float64),
        np.repeat(mus, pool, axis=0),
    )
    order = sorted(range(pool), key=lambda i: (-sims[i], image_ids[i]))
    return [(image_ids[i], float(sims[i])) for i in order[:k]]


def ranking_spearman(ranked_a: Sequence[str], ranked_b: Sequence[str]) -> float:
    """Spearman rank correlation between two orderings of the same ids."""
    if set(ranked_a) != set(ranked_b):
        raise DataError("rankings must cover the same ids")
    pos_b = {v: i for i, v in enumerate(ranked_b)}
    rho = spearmanr(range(len(ranked_a)), [pos_b[v] for v in ranked_a]).statistic
    return float(rho)
