"""The seven training-objective terms, each with value and analytic gradients.

Gradient buffers are keyed by canonical tensor names ("img_emb",
"mus_emb", "sim_pred", "img_va_pred", "mus_va_pred") so reports from
different terms can be merged into one weighted total.

Conventions embedded here: D() is the squared Euclidean distance, a
small epsilon is added inside every distance before any ratio or log,
the cross-modal ratio loss compares feature ratios against similarity
ratios while the single-modal ratio losses compare against squared
label-distance ratios, and the ratio/margin terms are batch sums while
the two MSE terms are batch means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .va import SimilarityScale

TERM_CFR = "cfr"
TERM_CFM = "cfm"
TERM_SIM = "sim"
TERM_SFR_IMAGE = "sfr_image"
TERM_SFR_MUSIC = "sfr_music"
TERM_IMAGE_VA = "image_va"
TERM_MUSIC_VA = "music_va"
ALL_TERMS = (
    TERM_CFR,
    TERM_CFM,
    TERM_SIM,
    TERM_SFR_IMAGE,
    TERM_SFR_MUSIC,
    TERM_IMAGE_VA,
    TERM_MUSIC_VA,
)
SIMILARITY_FAMILY = (TERM_SIM, TERM_CFR, TERM_CFM)
RATIO_TERMS = (TERM_CFR, TERM_SFR_IMAGE, TERM_SFR_MUSIC)

GRAD_IMG_EMB = "img_emb"
GRAD_MUS_EMB = "mus_emb"
GRAD_SIM_PRED = "sim_pred"
GRAD_IMG_VA_PRED = "img_va_pred"
GRAD_MUS_VA_PRED = "mus_va_pred"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0  # maximum tolerable matched-pair embedding distance
    epsilon: float = 1e-8  # added inside every distance before ratio/log
    weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in ALL_TERMS})
    enabled: dict[str, bool] = field(default_factory=lambda: {t: True for t in ALL_TERMS})
    batch_normalize: bool = False  # divide the summed terms by B (experimental)

    def __post_init__(self):
        if not (self.epsilon > 0.0):
            raise DataError("epsilon must be positive")
        if self.alpha < 0.0:
            raise DataError("alpha must be nonnegative")
        for term in ALL_TERMS:
            if term not in self.weights or term not in self.enabled:
                raise DataError(f"loss config is missing term {term!r}")
            w = self.weights[term]
            if not (np.isfinite(w) and w >= 0.0):
                raise DataError(f"weight for {term!r} must be finite and nonnegative")
        if not any(self.enabled.values()):
            raise DataError("at least one loss term must be enabled")

    def enabled_terms(self) -> tuple[str, ...]:
        return tuple(t for t in ALL_TERMS if self.enabled[t])

    @classmethod
    def full(cls, **kwargs) -> "LossConfig":
        return cls(**kwargs)

    @classmethod
    def similarity_family(cls, **kwargs) -> "LossConfig":
        enabled = {t: t in SIMILARITY_FAMILY for t in ALL_TERMS}
        return cls(enabled=enabled, **kwargs)

    @classmethod
    def from_ablation_flags(
        cls, sim: bool, va: bool, cfr: bool, cfm: bool, sfr: bool, **kwargs
    ) -> "LossConfig":
        enabled = {
            TERM_SIM: sim,
            TERM_CFR: cfr,
            TERM_CFM: cfm,
            TERM_SFR_IMAGE: sfr,
            TERM_SFR_MUSIC: sfr,
            TERM_IMAGE_VA: va,
            TERM_MUSIC_VA: va,
        }
        return cls(enabled=enabled, **kwargs)


@dataclass
class LossReport:
    terms: dict[str, float]
    total: float
    grads: dict[str, np.ndarray]


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


def _check_indices(name: str, idx: np.ndarray, batch: int, forbid_self: bool = True):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (batch,):
        raise DataError(f"{name} must have one index per batch row")
    if np.any(idx < 0) or np.any(idx >= batch):
        raise DataError(f"{name} contains an index outside [0, {batch})")
    if forbid_self and np.any(idx == np.arange(batch)):
        raise DataError(f"{name} contains a self-index")
    return idx


def _sq_dist_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    return np.sum(diff * diff, axis=1)


def cfr_loss(
    img_emb: np.ndarray,
    mus_emb: np.ndarray,
    pair_sim: np.ndarray,
    img_labels: np.ndarray,
    mus_labels: np.ndarray,
    scale: SimilarityScale,
    neg_music_for_image: np.ndarray,
    neg_image_for_music: np.ndarray,
    cfg: LossConfig,
) -> LossReport:
    """Cross-modal feature-ratio loss over matched rows.

    Row i of both embedding tensors is the matched pair. For the image
    anchor, the negative is the music row neg_music_for_image[i]; the
    symmetric music-anchored sum uses neg_image_for_music[i]. The
    label-side ratio uses the stored pair similarity against the
    negative's similarity recomputed from the VA labels.
    """
    u = _check_finite("img_emb", img_emb)
    w = _check_finite("mus_emb", mus_emb)
    b = u.shape[0]
    if b < 2:
        raise DataError("cfr needs a batch of at least 2 matched pairs")
    if u.shape != w.shape:
        raise DataError("cfr embeddings must share a shape")
    s_pos = np.asarray(pair_sim, dtype=np.float64)
    if np.any(s_pos <= 0.0) or np.any(s_pos > 1.0):
        raise DataError("pair similarities must lie in (0, 1]")
    j_mus = _check_indices("neg_music_for_image", neg_music_for_image, b)
    j_img = _check_indices("neg_image_for_music", neg_image_for_music, b)
    eps = cfg.epsilon

    grad_u = np.zeros_like(u)
    grad_w = np.zeros_like(w)
    value = 0.0
    norm = 1.0 / b if cfg.batch_normalize else 1.0

    d_pos = _sq_dist_rows(u, w) + eps
    for anchors, others, j_idx, a_labels, o_labels, grad_a, grad_o in (
        (u, w, j_mus, img_labels, mus_labels, grad_u, grad_w),
        (w, u, j_img, mus_labels, img_labels, grad_w, grad_u),
    ):
        neg_rows = others[j_idx]
        d_neg = _sq_dist_rows(anchors, neg_rows) + eps
        label_d_neg = np.sqrt(_sq_dist_rows(a_labels, o_labels[j_idx]))
        s_neg = np.exp(-label_d_neg / scale.sigma)
        r = np.log(d_pos) - np.log(d_neg) - (np.log(s_pos) - np.log(s_neg))
        value += float(np.sum(r * r)) * norm

        coef = 2.0 * r * norm
        pos_dir = 2.0 * (anchors - others) / d_pos[:, None]
        neg_dir = 2.0 * (anchors - neg_rows) / d_neg[:, None]
        grad_a += coef[:, None] * (pos_dir - neg_dir)
        grad_o += coef[:, None] * (-pos_dir)
        np.add.at(grad_o, j_idx, coef[:, None] * neg_dir)

    return LossReport(
        terms={TERM_CFR: value},
        total=value,
        grads={GRAD_IMG_EMB: grad_u, GRAD_MUS_EMB: grad_w},
    )


def cfm_loss(img_emb: np.ndarray, mus_emb: np.ndarray, cfg: LossConfig) -> LossReport:
    """Hinge on the matched-pair embedding distance beyond alpha.

    The subgradient at exactly ||u - w|| = alpha is 0 (the hinge is
    active only for strictly larger distances).
    """
    u = _check_finite("img_emb", img_emb)
    w = _check_finite("mus_emb", mus_emb)
    if u.shape != w.shape:
        raise DataError("cfm embeddings must share a shape")
    norm = 1.0 / u.shape[0] if cfg.batch_normalize else 1.0

    diff = u - w
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    active = dist > cfg.alpha
    value = float(np.sum(dist[active] - cfg.alpha)) * norm

    grad_u = np.zeros_like(u)
    if np.any(active):
        unit = diff[active] / dist[active][:, None]
        grad_u[active] = unit * norm
    grad_w = -grad_u
    return LossReport(
        terms={TERM_CFM: value},
        total=value,
        grads={GRAD_IMG_EMB: grad_u, GRAD_MUS_EMB: grad_w.copy()},
    )


def sfr_loss(
    emb: np.ndarray,
    labels: np.ndarray,
    neighbor_j: np.ndarray,
    neighbor_k: np.ndarray,
    cfg: LossConfig,
    modality: str = "image",
) -> LossReport:
    """Single-modal feature-ratio loss with an anchor and two neighbors.

    Anchors whose neighbor indices are -1 were skipped by the sampler
    (degenerate label-side ratio) and contribute nothing.
    """
    e = _check_finite("emb", emb)
    y = np.asarray(labels, dtype=np.float64)
    b = e.shape[0]
    if b < 3:
        raise DataError("sfr needs a batch of at least 3 rows")
    j = np.asarray(neighbor_j, dtype=np.int64)
    k = np.asarray(neighbor_k, dtype=np.int64)
    if j.shape != (b,) or k.shape != (b,):
        raise DataError("neighbor index lists must have one entry per row")
    active = (j >= 0) & (k >= 0)
    idx = np.arange(b)
    for name, arr in (("neighbor_j", j), ("neighbor_k", k)):
        a = arr[active]
        if np.any(a >= b):
            raise DataError(f"{name} contains an index outside [0, {b})")
        if np.any(a == idx[active]):
            raise DataError(f"{name} contains a self-index")
    if np.any(j[active] == k[active]):
        raise DataError("an anchor's two neighbors must be distinct")

    term = TERM_SFR_IMAGE if modality == "image" else TERM_SFR_MUSIC
    grad_key = GRAD_IMG_EMB if modality == "image" else GRAD_MUS_EMB
    grad = np.zeros_like(e)
    if not np.any(active):
        return LossReport(terms={term: 0.0}, total=0.0, grads={grad_key: grad})

    eps = cfg.epsilon
    norm = 1.0 / b if cfg.batch_normalize else 1.0
    ia = idx[active]
    ja = j[active]
    ka = k[active]

    dj = _sq_dist_rows(e[ia], e[ja]) + eps
    dk = _sq_dist_rows(e[ia], e[ka]) + eps
    yj = _sq_dist_rows(y[ia], y[ja]) + eps
    yk = _sq_dist_rows(y[ia], y[ka]) + eps
    r = np.log(dj) - np.log(dk) - (np.log(yj) - np.log(yk))
    value = float(np.sum(r * r)) * norm

    coef = 2.0 * r * norm
    dir_j = 2.0 * (e[ia] - e[ja]) / dj[:, None]
    dir_k = 2.0 * (e[ia] - e[ka]) / dk[:, None]
    np.add.at(grad, ia, coef[:, None] * (dir_j - dir_k))
    np.add.at(grad, ja, -coef[:, None] * dir_j)
    np.add.at(grad, ka, coef[:, None] * dir_k)
    return LossReport(terms={term: value}, total=value, grads={grad_key: grad})


def sim_mse_loss(pred_sim: np.ndarray, true_sim: np.ndarray) -> LossReport:
    """Mean squared error of the predicted pair similarity."""
    pred = _check_finite("pred_sim", pred_sim)
    true = _check_finite("true_sim", true_sim)
    if pred.shape != true.shape or pred.ndim != 1 or pred.shape[0] == 0:
        raise DataError(
            f"similarity vectors must be equal-length and non-empty, "
            f"got {pred.shape} vs {true.shape}"
        )
    b = pred.shape[0]
    diff = true - pred
    value = float(np.sum(diff * diff)) / b
    return LossReport(
        terms={TERM_SIM: value},
        total=value,
        grads={GRAD_SIM_PRED: -2.0 * diff / b},
    )


def va_mse_loss(pred: np.ndarray, true: np.ndarray, modality: str = "image") -> LossReport:
    """Mean over the batch of the squared VA error per row."""
    p = _check_finite("pred_va", pred)
    t = _check_finite("true_va", true)
    if p.shape != t.shape or p.ndim != 2 or p.shape[0] == 0:
        raise DataError(f"VA arrays must be equal-shape (B, 2), got {p.shape} vs {t.shape}")
    term = TERM_IMAGE_VA if modality == "image" else TERM_MUSIC_VA
    grad_key = GRAD_IMG_VA_PRED if modality == "image" else GRAD_MUS_VA_PRED
    b = p.shape[0]
    diff = p - t
    value = float(np.sum(diff * diff)) / b
    return LossReport(terms={term: value}, total=value, grads={grad_key: 2.0 * diff / b})


def total_loss(reports: list[LossReport], cfg: LossConfig) -> LossReport:
    """Weighted sum of the enabled terms; gradients merged per tensor key.

    Reports for disabled terms are recorded in `terms` but excluded
    from the total and from the gradient buffers.
    """
    seen: dict[str, LossReport] = {}
    for report in reports:
        for term in report.terms:
            if term in seen:
                raise DataError(f"term {term!r} supplied more than once")
            seen[term] = report
    missing = [t for t in cfg.enabled_terms() if t not in seen]
    if missing:
        raise DataError(f"enabled loss terms missing from reports: {missing}")

    terms = {t: r.terms[t] for t, r in seen.items()}
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for term in cfg.enabled_terms():
        report = seen[term]
        wgt = cfg.weights[term]
        total += wgt * report.terms[term]
        for key, g in report.grads.items():
            grads[key] = grads.get(key, 0.0) + wgt * g
    if not np.isfinite(total):
        raise NumericError("non-finite total loss")
    return LossReport(terms=terms, total=total, grads=grads)
