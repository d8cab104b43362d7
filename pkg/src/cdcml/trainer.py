"""Batch construction, companion sampling, and the joint training loop.

Every random draw comes from its own purpose-keyed stream derived from
(seed, epoch, batch, tag), so toggling one loss term never shifts the
draws consumed by another. That is what makes ablation rows comparable
and the determinism contract cheap to keep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from .dataset import Corpus, PairRecord, SplitManifest, verify_pairs
from .errors import DataError, NumericError
from .nn import (
    ArchConfig,
    ModelParams,
    OptimizerState,
    accumulate_grads,
    apply_sgd,
    build_model,
    lr_at,
    save_checkpoint,
)
from .va import SimilarityScale

# Stream tags for purpose-keyed RNG derivation.
_TAG_SHUFFLE = 101
_TAG_CFR_IMG = 102
_TAG_CFR_MUS = 103
_TAG_SFR_IMG = 104
_TAG_SFR_MUS = 105
_TAG_DROP_SIM = 106
_TAG_DROP_VA_IMG = 107
_TAG_DROP_VA_MUS = 108

MIN_BATCH = 3  # shorter trailing batches are dropped


def _stream_seed(*key: int) -> int:
    """Collapse a purpose key into one integer seed, deterministically."""
    return int(np.random.SeedSequence(tuple(int(k) for k in key)).generate_state(1)[0])


@dataclass
class SplitItems:
    """One split's items for one modality, as dense arrays."""

    ids: list[str]
    features: np.ndarray  # (n, dim)
    labels: np.ndarray  # (n, 2)


@dataclass
class SplitPairs:
    """One split's pairs as indices into that split's item arrays."""

    image_rows: np.ndarray
    music_rows: np.ndarray
    similarity: np.ndarray

    def __len__(self) -> int:
        return self.similarity.shape[0]


@dataclass
class SplitData:
    """Everything the trainer and evaluator read: per-split items and pairs."""

    sigma: SimilarityScale
    items: dict[str, dict[str, SplitItems]]  # items[split][modality]
    pairs: dict[str, SplitPairs]
    image_dim: int
    music_dim: int

    @classmethod
    def build(
        cls,
        corpus: Corpus,
        manifest: SplitManifest,
        pairs_by_split: dict[str, Sequence[PairRecord]],
        check_pairs: bool = True,
    ) -> "SplitData":
        if check_pairs:
            for split_pairs in pairs_by_split.values():
                verify_pairs(split_pairs, corpus, manifest.sigma)
        items: dict[str, dict[str, SplitItems]] = {}
        for split in manifest.ids:
            items[split] = {}
            for modality in ("image", "music"):
                by_id = corpus.by_id(modality)
                ids = manifest.split_ids(split, modality)
                missing = [i for i in ids if i not in by_id]
                if missing:
                    raise DataError(
                        f"split manifest references unknown {modality} ids, "
                        f"e.g. {missing[0]!r}"
                    )
                feats = np.stack([by_id[i].features for i in ids]) if ids else np.zeros(
                    (0, corpus.image_dim if modality == "image" else corpus.music_dim)
                )
                labels = np.array(
                    [(by_id[i].label.valence, by_id[i].label.arousal) for i in ids],
                    dtype=np.float64,
                ).reshape(len(ids), 2)
                items[split][modality] = SplitItems(ids=list(ids), features=feats, labels=labels)

        pairs: dict[str, SplitPairs] = {}
        for split, records in pairs_by_split.items():
            img_pos = {i: p for p, i in enumerate(items[split]["image"].ids)}
            mus_pos = {i: p for p, i in enumerate(items[split]["music"].ids)}
            img_rows, mus_rows, sims = [], [], []
            for rec in records:
                if rec.image_id not in img_pos or rec.music_id not in mus_pos:
                    raise DataError(
                        f"{split} pair ({rec.image_id}, {rec.music_id}) references an "
                        f"item outside the {split} split"
                    )
                img_rows.append(img_pos[rec.image_id])
                mus_rows.append(mus_pos[rec.music_id])
                sims.append(rec.similarity)
            pairs[split] = SplitPairs(
                image_rows=np.array(img_rows, dtype=np.int64),
                music_rows=np.array(mus_rows, dtype=np.int64),
                similarity=np.array(sims, dtype=np.float64),
            )
        return cls(
            sigma=manifest.sigma,
            items=items,
            pairs=pairs,
            image_dim=corpus.image_dim,
            music_dim=corpus.music_dim,
        )


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    loss: L.LossConfig | None = None
    seed: int = 0
    mode: str = "full"  # "full" | "similarity_only"
    arch: ArchConfig = field(default_factory=ArchConfig)
    separate_music_va: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "similarity_only"):
            raise DataError(f"unknown training mode {self.mode!r}")
        if self.loss is None:
            self.loss = (
                L.LossConfig.similarity_family()
                if self.mode == "similarity_only"
                else L.LossConfig.full()
            )
        ratio_on = any(self.loss.enabled[t] for t in L.RATIO_TERMS)
        if ratio_on and self.batch_size < MIN_BATCH:
            raise DataError("feature-ratio losses need batch_size >= 3")
        if self.batch_size < 2:
            raise DataError("batch_size must be at least 2 (train-mode batch norm)")
        if self.epochs <= 0:
            raise DataError("epochs must be positive")


@dataclass
class TrainHistory:
    columns: list[str]
    records: list[dict[str, float]] = field(default_factory=list)

    def to_csv_text(self) -> str:
        lines = [",".join(self.columns)]
        for rec in self.records:
            cells = []
            for col in self.columns:
                value = rec[col]
                cells.append(str(value) if col == "epoch" else repr(float(value)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text())


def make_batches(pairs, batch_size: int, epoch_seed) -> list[np.ndarray]:
    """Seeded shuffle, contiguous batches; trailing batch kept only if >= 3."""
    n = pairs if isinstance(pairs, int) else len(pairs)
    if n == 0:
        raise DataError("cannot batch an empty pair list")
    perm = np.random.default_rng(epoch_seed).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < min(batch_size, MIN_BATCH):
        batches.pop()
    return batches


@dataclass
class Companions:
    """Per-anchor negative and neighbor indices for the ratio losses."""

    neg_music_for_image: np.ndarray
    neg_image_for_music: np.ndarray
    sfr_image_j: np.ndarray
    sfr_image_k: np.ndarray
    sfr_music_j: np.ndarray
    sfr_music_k: np.ndarray
    sfr_image_skipped: int = 0
    sfr_music_skipped: int = 0


def _draw_other(rng: np.random.Generator, b: int) -> np.ndarray:
    """For each i, a uniform index j != i."""
    return (np.arange(b) + rng.integers(1, b, size=b)) % b


def _draw_neighbor_pairs(
    rng: np.random.Generator, labels: np.ndarray | None, b: int, max_retries: int
) -> tuple[np.ndarray, np.ndarray, int]:
    """Distinct (j, k) per anchor, resampling anchors whose label-side
    distances would be degenerate; exhausted anchors are marked -1."""
    j = _draw_other(rng, b)
    k = _draw_other(rng, b)

    def bad(i: int) -> bool:
        if j[i] == k[i]:
            return True
        if labels is None:
            return False
        return bool(
            np.all(labels[i] == labels[j[i]]) or np.all(labels[i] == labels[k[i]])
        )

    skipped = 0
    for i in range(b):
        retries = 0
        while bad(i):
            if retries >= max_retries:
                j[i] = -1
                k[i] = -1
                skipped += 1
                break
            j[i] = (i + int(rng.integers(1, b))) % b
            k[i] = (i + int(rng.integers(1, b))) % b
            retries += 1
    return j, k, skipped


def sample_companions(
    batch_size: int,
    seed,
    image_labels: np.ndarray | None = None,
    music_labels: np.ndarray | None = None,
    want_sfr: bool = True,
    max_retries: int = 16,
) -> Companions:
    """Seeded uniform companion draws for the ratio losses.

    `seed` is an int or a purpose key (sequence of ints). Cross-modal
    negatives need a batch of at least 2; neighbor pairs need at least
    3 and otherwise come back all-skipped with a counter.
    """
    b = int(batch_size)
    if b < 2:
        raise DataError("companion sampling needs a batch of at least 2")
    key = [int(seed)] if isinstance(seed, (int, np.integer)) else [int(s) for s in seed]

    neg_mus = _draw_other(np.random.default_rng(key + [_TAG_CFR_IMG]), b)
    neg_img = _draw_other(np.random.default_rng(key + [_TAG_CFR_MUS]), b)

    if want_sfr and b >= MIN_BATCH:
        img_j, img_k, img_skip = _draw_neighbor_pairs(
            np.random.default_rng(key + [_TAG_SFR_IMG]), image_labels, b, max_retries
        )
        mus_j, mus_k, mus_skip = _draw_neighbor_pairs(
            np.random.default_rng(key + [_TAG_SFR_MUS]), music_labels, b, max_retries
        )
    else:
        img_j = img_k = mus_j = mus_k = np.full(b, -1, dtype=np.int64)
        img_skip = mus_skip = b if want_sfr else 0
    return Companions(
        neg_music_for_image=neg_mus,
        neg_image_for_music=neg_img,
        sfr_image_j=img_j,
        sfr_image_k=img_k,
        sfr_music_j=mus_j,
        sfr_music_k=mus_k,
        sfr_image_skipped=img_skip,
        sfr_music_skipped=mus_skip,
    )


def _validation_metrics(model: ModelParams, data: SplitData, split: str = "val",
                        want_va: bool = True, chunk: int = 1024) -> dict[str, float]:
    """Eval-mode metric pass; the only place validation data is read."""
    pairs = data.pairs[split]
    items = data.items[split]
    preds = []
    for start in range(0, len(pairs), chunk):
        sel = slice(start, start + chunk)
        img_x = items["image"].features[pairs.image_rows[sel]]
        mus_x = items["music"].features[pairs.music_rows[sel]]
        preds.append(model.predict_similarity(img_x, mus_x))
    pred = np.concatenate(preds) if preds else np.zeros(0)
    err = pairs.similarity - pred
    metrics = {
        "val_sim_mse": float(np.mean(err * err)),
        "val_sim_mae": float(np.mean(np.abs(err))),
    }
    if want_va:
        for modality, col in (("image", "val_image_va_mse"), ("music", "val_music_va_mse")):
            feats = items[modality].features
            va_pred = model.predict_va(feats, modality)
            diff = va_pred - items[modality].labels
            metrics[col] = float(np.mean(np.sum(diff * diff, axis=1)))
    return metrics


def train(
    data: SplitData,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Joint end-to-end optimization of the weighted total objective.

    Per batch: both branches embed the batch's items, the enabled
    losses are evaluated on the embeddings and predictor outputs, and
    one SGD step is taken on the weighted total at the epoch's learning
    rate. Validation metrics are computed in eval mode once per epoch.
    """
    cfg = config.loss
    enabled = cfg.enabled
    model = build_model(
        data.image_dim,
        data.music_dim,
        arch=config.arch,
        seed=config.seed,
        separate_music_va=config.separate_music_va,
    )
    train_pairs = data.pairs["train"]
    train_items = data.items["train"]
    if len(train_pairs) == 0:
        raise DataError("no training pairs")

    want_va_metrics = enabled[L.TERM_IMAGE_VA] or enabled[L.TERM_MUSIC_VA]
    term_cols = [f"train_{t}" for t in L.ALL_TERMS if enabled[t]]
    columns = ["epoch", "lr", "train_total", *term_cols, "val_sim_mse", "val_sim_mae"]
    if want_va_metrics:
        columns += ["val_image_va_mse", "val_music_va_mse"]
    history = TrainHistory(columns=columns)

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_val = np.inf
    need_sfr = enabled[L.TERM_SFR_IMAGE] or enabled[L.TERM_SFR_MUSIC]

    for epoch in range(config.epochs):
        lr = lr_at(config.optimizer, epoch)
        batches = make_batches(
            len(train_pairs), config.batch_size, [config.seed, _TAG_SHUFFLE, epoch]
        )
        if not batches:
            raise DataError("batching produced no usable batches; add pairs or shrink batch_size")
        term_sums = {t: 0.0 for t in L.ALL_TERMS if enabled[t]}
        total_sum = 0.0

        for b_idx, batch in enumerate(batches):
            img_rows = train_pairs.image_rows[batch]
            mus_rows = train_pairs.music_rows[batch]
            img_x = train_items["image"].features[img_rows]
            mus_x = train_items["music"].features[mus_rows]
            img_y = train_items["image"].labels[img_rows]
            mus_y = train_items["music"].labels[mus_rows]
            s_pos = train_pairs.similarity[batch]
            bsz = len(batch)

            try:
                img_emb, img_cache = model.image_branch.forward(img_x, mode="train")
                mus_emb, mus_cache = model.music_branch.forward(mus_x, mode="train")
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b_idx}: {exc}") from exc

            comp = sample_companions(
                bsz,
                [config.seed, epoch, b_idx],
                image_labels=img_y,
                music_labels=mus_y,
                want_sfr=need_sfr,
            )

            reports = []
            sim_cache = va_img_cache = va_mus_cache = None
            if enabled[L.TERM_SIM]:
                concat = np.concatenate([img_emb, mus_emb], axis=1)
                sim_out, sim_cache = model.similarity_predictor.forward(
                    concat,
                    mode="train",
                    dropout_seed=_stream_seed(config.seed, epoch, b_idx, _TAG_DROP_SIM),
                )
                reports.append(L.sim_mse_loss(sim_out[:, 0], s_pos))
            if enabled[L.TERM_CFR]:
                reports.append(
                    L.cfr_loss(
                        img_emb, mus_emb, s_pos, img_y, mus_y, data.sigma,
                        comp.neg_music_for_image, comp.neg_image_for_music, cfg,
                    )
                )
            if enabled[L.TERM_CFM]:
                reports.append(L.cfm_loss(img_emb, mus_emb, cfg))
            if enabled[L.TERM_SFR_IMAGE]:
                reports.append(
                    L.sfr_loss(img_emb, img_y, comp.sfr_image_j, comp.sfr_image_k, cfg, "image")
                )
            if enabled[L.TERM_SFR_MUSIC]:
                reports.append(
                    L.sfr_loss(mus_emb, mus_y, comp.sfr_music_j, comp.sfr_music_k, cfg, "music")
                )
            if enabled[L.TERM_IMAGE_VA]:
                va_out, va_img_cache = model.va_net("image").forward(
                    img_emb,
                    mode="train",
                    dropout_seed=_stream_seed(config.seed, epoch, b_idx, _TAG_DROP_VA_IMG),
                )
                reports.append(L.va_mse_loss(va_out, img_y, modality="image"))
            if enabled[L.TERM_MUSIC_VA]:
                va_out, va_mus_cache = model.va_net("music").forward(
                    mus_emb,
                    mode="train",
                    dropout_seed=_stream_seed(config.seed, epoch, b_idx, _TAG_DROP_VA_MUS),
                )
                reports.append(L.va_mse_loss(va_out, mus_y, modality="music"))

            try:
                tot = L.total_loss(reports, cfg)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b_idx}: {exc}") from exc
            if not np.isfinite(tot.total):
                raise NumericError(f"non-finite total loss at epoch {epoch} batch {b_idx}")

            d_img_emb = np.array(tot.grads.get(L.GRAD_IMG_EMB, 0.0)) + np.zeros_like(img_emb)
            d_mus_emb = np.array(tot.grads.get(L.GRAD_MUS_EMB, 0.0)) + np.zeros_like(mus_emb)

            sim_grads = None
            if sim_cache is not None:
                d_concat, sim_grads = model.similarity_predictor.backward(
                    sim_cache, tot.grads[L.GRAD_SIM_PRED][:, None]
                )
                e = img_emb.shape[1]
                d_img_emb += d_concat[:, :e]
                d_mus_emb += d_concat[:, e:]

            va_grads: dict[int, list] = {}
            if va_img_cache is not None:
                dx, g = model.va_net("image").backward(
                    va_img_cache, tot.grads[L.GRAD_IMG_VA_PRED]
                )
                d_img_emb += dx
                net_id = id(model.va_net("image"))
                va_grads[net_id] = accumulate_grads(va_grads.get(net_id), g)
            if va_mus_cache is not None:
                dx, g = model.va_net("music").backward(
                    va_mus_cache, tot.grads[L.GRAD_MUS_VA_PRED]
                )
                d_mus_emb += dx
                net_id = id(model.va_net("music"))
                va_grads[net_id] = accumulate_grads(va_grads.get(net_id), g)

            _, img_branch_grads = model.image_branch.backward(img_cache, d_img_emb)
            _, mus_branch_grads = model.music_branch.backward(mus_cache, d_mus_emb)

            apply_sgd(model.image_branch, img_branch_grads, lr)
            apply_sgd(model.music_branch, mus_branch_grads, lr)
            if sim_grads is not None:
                apply_sgd(model.similarity_predictor, sim_grads, lr)
            for net in (model.va_predictor, model.va_predictor_music):
                if net is not None and id(net) in va_grads:
                    apply_sgd(net, va_grads[id(net)], lr)

            total_sum += tot.total
            for t in term_sums:
                term_sums[t] += tot.terms[t]

        record: dict[str, float] = {"epoch": epoch, "lr": lr}
        record["train_total"] = total_sum / len(batches)
        for t, s in term_sums.items():
            record[f"train_{t}"] = s / len(batches)
        record.update(
            _validation_metrics(model, data, split="val", want_va=want_va_metrics)
        )
        history.records.append(record)

        if ckpt_dir is not None:
            if config.checkpoint_every > 0 and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt")
            if record["val_sim_mse"] < best_val:
                best_val = record["val_sim_mse"]
                save_checkpoint(model, ckpt_dir / "best.ckpt")

    return model, history
