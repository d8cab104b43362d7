"""Minimal differentiable numerics: dense layers, manual backprop, SGD.

Everything is float64. Layers are affine, batch_norm, relu, sigmoid,
and dropout; networks are flat stacks of them. Backward passes are
mathematically exact for the cached dropout mask and batch statistics,
which is what makes the finite-difference checks in `gradcheck` pass at
1e-6 relative error.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, DataError, NumericError, ShapeError

LAYER_KINDS = ("affine", "batch_norm", "relu", "sigmoid", "dropout")
BN_EPS = 1e-5  # variance floor inside every batch-norm sqrt
BN_MOMENTUM = 0.9

CKPT_MAGIC = "cdcml-ckpt v1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_dim: int
    output_dim: int
    rate: float = 0.0  # dropout only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DataError(f"unknown layer kind {self.kind!r}")
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ShapeError(f"layer dims must be positive, got {self}")
        if self.kind != "affine" and self.input_dim != self.output_dim:
            raise ShapeError(f"{self.kind} layer cannot change width: {self}")
        if self.kind == "dropout" and not (0.0 <= self.rate < 1.0):
            raise DataError(f"dropout rate must lie in [0, 1), got {self.rate!r}")


def affine(input_dim: int, output_dim: int) -> LayerSpec:
    return LayerSpec("affine", input_dim, output_dim)


def batch_norm(dim: int) -> LayerSpec:
    return LayerSpec("batch_norm", dim, dim)


def relu(dim: int) -> LayerSpec:
    return LayerSpec("relu", dim, dim)


def sigmoid(dim: int) -> LayerSpec:
    return LayerSpec("sigmoid", dim, dim)


def dropout(dim: int, rate: float) -> LayerSpec:
    return LayerSpec("dropout", dim, dim, rate=rate)


class Network:
    """An ordered stack of layers with parameters and running statistics."""

    def __init__(self, specs: list[LayerSpec], seed: int | None = None):
        if not specs:
            raise ShapeError("a network needs at least one layer")
        for prev, cur in zip(specs, specs[1:]):
            if prev.output_dim != cur.input_dim:
                raise ShapeError(
                    f"layer dims do not chain: {prev.output_dim} -> {cur.input_dim}"
                )
        self.specs = list(specs)
        self.params: list[dict[str, np.ndarray]] = []
        self.running: list[dict[str, np.ndarray]] = []
        rng = np.random.default_rng(seed if seed is not None else 0)
        for spec in self.specs:
            p: dict[str, np.ndarray] = {}
            r: dict[str, np.ndarray] = {}
            if spec.kind == "affine":
                # Seeded uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
                a = np.sqrt(6.0 / (spec.input_dim + spec.output_dim))
                p["W"] = rng.uniform(-a, a, size=(spec.input_dim, spec.output_dim))
                p["b"] = np.zeros(spec.output_dim)
            elif spec.kind == "batch_norm":
                p["gamma"] = np.ones(spec.output_dim)
                p["beta"] = np.zeros(spec.output_dim)
                r["mean"] = np.zeros(spec.output_dim)
                r["var"] = np.ones(spec.output_dim)
            self.params.append(p)
            self.running.append(r)

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].output_dim

    @property
    def has_dropout(self) -> bool:
        return any(s.kind == "dropout" and s.rate > 0 for s in self.specs)

    def forward(
        self,
        x: np.ndarray,
        mode: str = "train",
        dropout_seed: int | None = None,
        update_stats: bool | None = None,
    ) -> tuple[np.ndarray, list]:
        """Apply all layers in order; the cache feeds `backward`."""
        if mode not in ("train", "eval"):
            raise DataError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                f"batch shape {x.shape} does not match network input dim {self.input_dim}"
            )
        if mode == "train" and self.has_dropout and dropout_seed is None:
            raise DataError("train-mode forward through dropout needs a dropout_seed")
        if update_stats is None:
            update_stats = mode == "train"

        cache: list = [mode]
        for idx, spec in enumerate(self.specs):
            p = self.params[idx]
            if spec.kind == "affine":
                cache.append(("affine", x))
                x = x @ p["W"] + p["b"]
            elif spec.kind == "batch_norm":
                if mode == "train":
                    if x.shape[0] < 2:
                        raise DataError(
                            "train-mode batch_norm needs a batch of at least 2 rows"
                        )
                    mu = np.mean(x, axis=0)
                    var = np.var(x, axis=0)
                    inv = 1.0 / np.sqrt(var + BN_EPS)
                    xhat = (x - mu) * inv
                    if update_stats:
                        r = self.running[idx]
                        r["mean"] = BN_MOMENTUM * r["mean"] + (1 - BN_MOMENTUM) * mu
                        r["var"] = BN_MOMENTUM * r["var"] + (1 - BN_MOMENTUM) * var
                else:
                    r = self.running[idx]
                    inv = 1.0 / np.sqrt(r["var"] + BN_EPS)
                    xhat = (x - r["mean"]) * inv
                cache.append(("batch_norm", xhat, inv))
                x = p["gamma"] * xhat + p["beta"]
            elif spec.kind == "relu":
                cache.append(("relu", x > 0))
                x = np.maximum(x, 0.0)
            elif spec.kind == "sigmoid":
                x = 1.0 / (1.0 + np.exp(-x))
                cache.append(("sigmoid", x))
            elif spec.kind == "dropout":
                if mode == "train" and spec.rate > 0.0:
                    rng = np.random.default_rng([dropout_seed, idx])
                    mask = (rng.random(x.shape) >= spec.rate) / (1.0 - spec.rate)
                    cache.append(("dropout", mask))
                    x = x * mask
                else:
                    cache.append(("dropout", None))
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite values in network output")
        return x, cache

    def backward(
        self, cache: list, output_grad: np.ndarray
    ) -> tuple[np.ndarray, list[dict[str, np.ndarray]]]:
        """Gradients w.r.t. the input batch and every parameter."""
        if len(cache) != len(self.specs) + 1:
            raise DataError("stale or mismatched forward cache")
        mode = cache[0]
        dx = np.asarray(output_grad, dtype=np.float64)
        if dx.ndim != 2 or dx.shape[1] != self.output_dim:
            raise ShapeError(
                f"output_grad shape {dx.shape} does not match output dim {self.output_dim}"
            )
        grads: list[dict[str, np.ndarray]] = [dict() for _ in self.specs]
        for idx in range(len(self.specs) - 1, -1, -1):
            spec = self.specs[idx]
            entry = cache[idx + 1]
            if entry[0] != spec.kind:
                raise DataError("stale or mismatched forward cache")
            p = self.params[idx]
            if spec.kind == "affine":
                x = entry[1]
                grads[idx]["W"] = x.T @ dx
                grads[idx]["b"] = np.sum(dx, axis=0)
                dx = dx @ p["W"].T
            elif spec.kind == "batch_norm":
                _, xhat, inv = entry
                grads[idx]["gamma"] = np.sum(dx * xhat, axis=0)
                grads[idx]["beta"] = np.sum(dx, axis=0)
                dxhat = dx * p["gamma"]
                if mode == "train":
                    n = dx.shape[0]
                    dx = (inv / n) * (
                        n * dxhat
                        - np.sum(dxhat, axis=0)
                        - xhat * np.sum(dxhat * xhat, axis=0)
                    )
                else:
                    dx = dxhat * inv
            elif spec.kind == "relu":
                dx = dx * entry[1]
            elif spec.kind == "sigmoid":
                y = entry[1]
                dx = dx * y * (1.0 - y)
            elif spec.kind == "dropout":
                mask = entry[1]
                if mask is not None:
                    dx = dx * mask
        return dx, grads

    def param_entries(self):
        """Deterministic (name, array) walk over parameters and running stats."""
        for idx, spec in enumerate(self.specs):
            for name in ("W", "b", "gamma", "beta"):
                if name in self.params[idx]:
                    yield f"{idx}.{name}", self.params[idx][name]
            for name in ("mean", "var"):
                if name in self.running[idx]:
                    yield f"{idx}.running_{name}", self.running[idx][name]


def apply_sgd(net: Network, grads: list[dict[str, np.ndarray]], lr: float) -> None:
    """One in-place step p <- p - lr * g; aborts on non-finite gradients."""
    for idx, layer_grads in enumerate(grads):
        for name, g in layer_grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for layer {idx} parameter {name!r}")
            p = net.params[idx][name]
            if p.shape != g.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} != parameter shape {p.shape} "
                    f"for layer {idx} {name!r}"
                )
            p -= lr * g


def accumulate_grads(
    total: list[dict[str, np.ndarray]] | None, extra: list[dict[str, np.ndarray]]
) -> list[dict[str, np.ndarray]]:
    if total is None:
        return [dict(layer) for layer in extra]
    for t, e in zip(total, extra):
        for name, g in e.items():
            t[name] = t[name] + g if name in t else g
    return total


@dataclass(frozen=True)
class ArchConfig:
    """Widths of the branches and predictor heads; defaults follow the
    three-affine-layer predictor blocks with 512-wide embeddings.

    Dropout (rate 0.5) defaults to the similarity head only: on the VA
    regression head its train/eval mismatch floors the attainable MSE
    at desk scale, so it ships disabled there but stays configurable.
    """

    embed_dim: int = 512
    branch_hidden: tuple[int, ...] = (512, 512)
    sim_hidden: tuple[int, ...] = (512, 256)
    va_hidden: tuple[int, ...] = (512, 512)
    sim_dropout: float = 0.5
    va_dropout: float = 0.0


def branch_specs(input_dim: int, arch: ArchConfig) -> list[LayerSpec]:
    """Feature branch: hidden affine+bn+relu blocks, linear embedding output."""
    specs: list[LayerSpec] = []
    prev = input_dim
    for width in arch.branch_hidden:
        specs += [affine(prev, width), batch_norm(width), relu(width)]
        prev = width
    specs.append(affine(prev, arch.embed_dim))
    return specs


def predictor_specs(input_dim: int, hidden: tuple[int, ...], output_dim: int,
                    dropout_rate: float) -> list[LayerSpec]:
    """Predictor head: affine+bn+relu(+dropout) hidden blocks, sigmoid output."""
    specs: list[LayerSpec] = []
    prev = input_dim
    for width in hidden:
        specs += [affine(prev, width), batch_norm(width), relu(width)]
        if dropout_rate > 0.0:
            specs.append(dropout(width, dropout_rate))
        prev = width
    specs += [affine(prev, output_dim), sigmoid(output_dim)]
    return specs


NET_NAMES = (
    "image_branch",
    "music_branch",
    "similarity_predictor",
    "va_predictor",
    "va_predictor_music",
)


@dataclass
class ModelParams:
    """All trainable weights; the VA predictor is shared across modalities
    unless a separate music head is attached."""

    image_branch: Network
    music_branch: Network
    similarity_predictor: Network
    va_predictor: Network
    va_predictor_music: Network | None = None

    def __post_init__(self):
        if self.image_branch.output_dim != self.music_branch.output_dim:
            raise ShapeError("image and music branches must share the embedding width")
        embed = self.image_branch.output_dim
        if self.similarity_predictor.input_dim != 2 * embed:
            raise ShapeError(
                f"similarity predictor input {self.similarity_predictor.input_dim} "
                f"must equal twice the embedding width {embed}"
            )
        if self.va_predictor.input_dim != embed or self.va_predictor.output_dim != 2:
            raise ShapeError("VA predictor must map the embedding width to 2 outputs")

    def networks(self):
        for name in NET_NAMES:
            net = getattr(self, name)
            if net is not None:
                yield name, net

    def va_net(self, modality: str) -> Network:
        if modality == "music" and self.va_predictor_music is not None:
            return self.va_predictor_music
        return self.va_predictor

    # eval-mode prediction helpers (batch-norm running stats, no dropout)

    def embed(self, feats: np.ndarray, modality: str) -> np.ndarray:
        branch = self.image_branch if modality == "image" else self.music_branch
        out, _ = branch.forward(feats, mode="eval")
        return out

    def predict_similarity(self, img_feats: np.ndarray, mus_feats: np.ndarray) -> np.ndarray:
        img_emb = self.embed(img_feats, "image")
        mus_emb = self.embed(mus_feats, "music")
        out, _ = self.similarity_predictor.forward(
            np.concatenate([img_emb, mus_emb], axis=1), mode="eval"
        )
        return out[:, 0]

    def predict_va(self, feats: np.ndarray, modality: str) -> np.ndarray:
        emb = self.embed(feats, modality)
        out, _ = self.va_net(modality).forward(emb, mode="eval")
        return out


def build_model(
    image_dim: int,
    music_dim: int,
    arch: ArchConfig = ArchConfig(),
    seed: int = 0,
    separate_music_va: bool = False,
) -> ModelParams:
    def net(specs, sub):
        return Network(specs, seed=np.random.default_rng([seed, 41, sub]).integers(2**63))

    model = ModelParams(
        image_branch=net(branch_specs(image_dim, arch), 0),
        music_branch=net(branch_specs(music_dim, arch), 1),
        similarity_predictor=net(
            predictor_specs(2 * arch.embed_dim, arch.sim_hidden, 1, arch.sim_dropout), 2
        ),
        va_predictor=net(
            predictor_specs(arch.embed_dim, arch.va_hidden, 2, arch.va_dropout), 3
        ),
        va_predictor_music=(
            net(predictor_specs(arch.embed_dim, arch.va_hidden, 2, arch.va_dropout), 4)
            if separate_music_va
            else None
        ),
    )
    return model


@dataclass
class OptimizerState:
    """SGD with stepwise learning-rate decay."""

    base_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 10
    epoch: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay_every <= 0:
            raise DataError("base_lr and decay_every must be positive")


def lr_at(opt: OptimizerState, epoch: int) -> float:
    if epoch < 0:
        raise DataError(f"epoch must be nonnegative, got {epoch}")
    return opt.base_lr * opt.decay_factor ** (epoch // opt.decay_every)


# ---------------------------------------------------------------------------
# checkpoint serialization

def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    """Bit-exact snapshot of specs, parameters, and running statistics.

    Written atomically via a temp file in the target directory.
    """
    path = Path(path)
    header_lines = [CKPT_MAGIC]
    tensor_dir: list[tuple[str, np.ndarray]] = []
    for net_name, net in model.networks():
        header_lines.append(f"net {net_name} layers {len(net.specs)}")
        for spec in net.specs:
            header_lines.append(
                f"layer {spec.kind} {spec.input_dim} {spec.output_dim} {spec.rate!r}"
            )
        for name, arr in net.param_entries():
            tensor_dir.append((f"{net_name}.{name}", arr))
    header_lines.append(f"tensors {len(tensor_dir)}")
    for name, arr in tensor_dir:
        dims = " ".join(str(d) for d in arr.shape)
        header_lines.append(f"tensor {name} {dims}")
    header_lines.append("end-header")

    blob = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in tensor_dir)
    payload = ("\n".join(header_lines) + "\n").encode("utf-8") + blob

    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    marker = b"end-header\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointFormatError(f"{path}: missing end-header marker")
    header_lines = raw[:cut].decode("utf-8").splitlines()
    blob = raw[cut + len(marker):]
    if not header_lines or header_lines[0] != CKPT_MAGIC:
        raise CheckpointFormatError(
            f"{path}: bad magic {header_lines[0] if header_lines else ''!r}, "
            f"expected {CKPT_MAGIC!r}"
        )

    nets: dict[str, Network] = {}
    tensor_dir: list[tuple[str, tuple[int, ...]]] = []
    i = 1
    while i < len(header_lines):
        tokens = header_lines[i].split()
        if tokens[0] == "net":
            net_name, n_layers = tokens[1], int(tokens[3])
            if net_name not in NET_NAMES:
                raise CheckpointFormatError(f"{path}: unknown network {net_name!r}")
            specs = []
            for j in range(n_layers):
                ltok = header_lines[i + 1 + j].split()
                if ltok[0] != "layer":
                    raise CheckpointFormatError(f"{path}: malformed layer table")
                specs.append(
                    LayerSpec(ltok[1], int(ltok[2]), int(ltok[3]), rate=float(ltok[4]))
                )
            nets[net_name] = Network(specs, seed=0)
            i += 1 + n_layers
        elif tokens[0] == "tensors":
            count = int(tokens[1])
            for j in range(count):
                ttok = header_lines[i + 1 + j].split()
                if ttok[0] != "tensor":
                    raise CheckpointFormatError(f"{path}: malformed tensor table")
                tensor_dir.append((ttok[1], tuple(int(d) for d in ttok[2:])))
            i += 1 + count
        else:
            raise CheckpointFormatError(f"{path}: unexpected header line {header_lines[i]!r}")

    offset = 0
    for name, shape in tensor_dir:
        net_name, _, entry = name.partition(".")
        if net_name not in nets:
            raise CheckpointFormatError(f"{path}: tensor {name!r} references unknown network")
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if offset + nbytes > len(blob):
            raise CheckpointFormatError(f"{path}: truncated file while reading tensor {name!r}")
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").astype(
            np.float64
        ).reshape(shape)
        offset += nbytes
        layer_idx_str, _, pname = entry.partition(".")
        layer_idx = int(layer_idx_str)
        net = nets[net_name]
        if pname.startswith("running_"):
            store, key = net.running[layer_idx], pname.removeprefix("running_")
        else:
            store, key = net.params[layer_idx], pname
        if key not in store:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has no slot in the layer")
        if store[key].shape != arr.shape:
            raise ShapeError(
                f"{path}: tensor {name!r} shape {arr.shape} != expected {store[key].shape}"
            )
        store[key] = arr
    if offset != len(blob):
        raise CheckpointFormatError(
            f"{path}: {len(blob) - offset} trailing bytes after the declared tensors"
        )

    required = ("image_branch", "music_branch", "similarity_predictor", "va_predictor")
    missing = [n for n in required if n not in nets]
    if missing:
        raise CheckpointFormatError(f"{path}: checkpoint lacks networks {missing}")
    return ModelParams(
        image_branch=nets["image_branch"],
        music_branch=nets["music_branch"],
        similarity_predictor=nets["similarity_predictor"],
        va_predictor=nets["va_predictor"],
        va_predictor_music=nets.get("va_predictor_music"),
    )
