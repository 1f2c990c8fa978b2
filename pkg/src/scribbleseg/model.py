"""Multi-scale online likelihood network and its training machinery.

The network classifies the central voxel of a cubic intensity patch: one 3D
convolution per scale (evaluated at the patch center during training), batch
norm + ReLU per scale, feature concatenation, then a small fully-connected
head with dropout on hidden layers.  Whole-volume inference realizes the same
computation fully convolutionally: same-padded convolutions plus 1x1x1
(per-voxel) dense layers, so interior voxels match the patch path exactly.

Supervision mixes two label sources with spatially varying weights: user
scribbles (weight 1 at the scribble, influence spread by the geodesic weight
map) and the pruned initial segmentation (weight 1 - W).  Both terms are
class-balanced with weights recomputed from the current label distribution.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn
from .errors import NothingToLearnError, TrainingDivergedError, ValidationError
from .geodesic import WeightMap
from .grid import LabelMap, ProbMap, ScribbleSet, Volume
from .nn import BatchNorm, Conv3d, CosineSchedule, Dense, StepSchedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyperparameters (defaults are the tuned ones)."""

    patch_size: int = 9
    scales: tuple[int, ...] = (1, 3, 5, 9)
    filters_per_scale: int = 32
    fc_sizes: tuple[int, ...] = (32, 16, 2)
    dropout: float = 0.3
    online_epochs: int = 200
    online_lr: float = 1e-2
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-3
    pretrain_drops: tuple[int, ...] = (35, 45)
    pretrain_samples_per_volume: int = 2048
    full_batch_limit: int = 2 ** 14
    minibatch_size: int = 2 ** 12
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "fc_sizes", tuple(int(s) for s in self.fc_sizes))
        object.__setattr__(self, "pretrain_drops", tuple(int(d) for d in self.pretrain_drops))
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValidationError(f"patch_size must be odd and positive, got {self.patch_size}")
        if not self.scales or any(s % 2 == 0 or s < 1 or s > self.patch_size for s in self.scales):
            raise ValidationError(f"scales must be odd and <= patch_size, got {self.scales}")
        if len(self.fc_sizes) < 1 or self.fc_sizes[-1] != 2:
            raise ValidationError(f"fc_sizes must end in 2 (binary logits), got {self.fc_sizes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.online_epochs < 1 or self.pretrain_epochs < 0:
            raise ValidationError("online_epochs must be >= 1 and pretrain_epochs >= 0")
        if self.online_lr <= 0 or self.pretrain_lr <= 0:
            raise ValidationError("learning rates must be positive")

    @classmethod
    def single_scale(cls, **overrides) -> "ModelConfig":
        """One 9^3 convolution with 128 filters: the no-multi-scale ablation."""
        base = dict(scales=(9,), filters_per_scale=128)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


_CONFIG_INT_KEYS = {
    "patch_size", "filters_per_scale", "online_epochs", "pretrain_epochs",
    "pretrain_samples_per_volume", "full_batch_limit", "minibatch_size", "seed",
}
_CONFIG_FLOAT_KEYS = {"dropout", "online_lr", "pretrain_lr"}
_CONFIG_TUPLE_KEYS = {"scales", "fc_sizes", "pretrain_drops"}


def save_config(cfg: ModelConfig, path) -> None:
    """Flat ``key: value`` file mirroring ModelConfig (tuples comma-joined)."""
    with open(path, "w", encoding="ascii") as fh:
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{f.name}: {value}\n")


def parse_config(text: str) -> ModelConfig:
    values: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ValidationError(f"config line {line_no}: expected 'key: value', got {line!r}")
        key, raw = (part.strip() for part in line.split(":", 1))
        if key in _CONFIG_TUPLE_KEYS:
            values[key] = tuple(int(v) for v in raw.split(",") if v != "")
        elif key in _CONFIG_INT_KEYS:
            values[key] = int(raw)
        elif key in _CONFIG_FLOAT_KEYS:
            values[key] = float(raw)
        else:
            raise ValidationError(f"config line {line_no}: unknown key {key!r}")
    return ModelConfig(**values)


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="ascii") as fh:
        return parse_config(fh.read())


class LikelihoodModel:
    """The network: per-scale conv + BN + ReLU, concat, dense head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        f = config.filters_per_scale
        self.scale_convs = [Conv3d(1, f, k, padding="same", rng=rng, dtype=dtype) for k in config.scales]
        self.scale_bns = [BatchNorm(f, dtype=dtype) for _ in config.scales]
        widths = [f * len(config.scales)] + list(config.fc_sizes)
        self.fcs = [Dense(widths[i], widths[i + 1], rng=rng, dtype=dtype) for i in range(len(config.fc_sizes))]
        self.fc_bns = [BatchNorm(w, dtype=dtype) for w in config.fc_sizes[:-1]]
        self.trained = False

    # --- parameter bookkeeping -------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for conv, bn in zip(self.scale_convs, self.scale_bns):
            out += conv.parameters() + bn.parameters()
        for i, fc in enumerate(self.fcs):
            out += fc.parameters()
            if i < len(self.fc_bns):
                out += self.fc_bns[i].parameters()
        return out

    def buffers(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for bn in self.scale_bns + self.fc_bns:
            out += bn.buffers()
        return out

    # --- patch path (training) -------------------------------------------------

    def forward_patches(self, patches: np.ndarray, train: bool, rng: np.random.Generator | None = None):
        """Logits for (B, K, K, K) patches; returns (logits, cache) for backward.

        Each scale is the center element of a valid convolution over the
        patch, computed directly as a dot product with the centered crop.
        """
        k0 = self.config.patch_size
        if patches.ndim != 4 or patches.shape[1:] != (k0, k0, k0):
            raise ValidationError(f"expected (B, {k0}, {k0}, {k0}) patches, got {patches.shape}")
        if train and self.config.dropout > 0 and rng is None:
            raise ValidationError("training forward pass with dropout requires an rng")
        b = patches.shape[0]
        feats = []
        cache: dict = {"train": train, "scales": [], "fc": []}
        for conv, bn, k in zip(self.scale_convs, self.scale_bns, self.config.scales):
            lo = (k0 - k) // 2
            crop = patches[:, lo : lo + k, lo : lo + k, lo : lo + k].reshape(b, k ** 3)
            pre = crop @ conv.weights.reshape(conv.out_channels, -1).T + conv.bias
            bn_out = bn.forward(pre, train)
            feats.append(nn.relu(bn_out))
            cache["scales"].append((crop, pre, bn_out))
        x = np.concatenate(feats, axis=1)
        for i, fc in enumerate(self.fcs):
            z = fc.forward(x)
            if i < len(self.fc_bns):
                bn_out = self.fc_bns[i].forward(z, train)
                a = nn.relu(bn_out)
                if train and self.config.dropout > 0:
                    mask = nn.dropout_mask(a.shape, self.config.dropout, rng, dtype=a.dtype)
                    a = a * mask
                else:
                    mask = None
                cache["fc"].append((x, z, bn_out, mask))
                x = a
            else:
                cache["fc"].append((x, z, None, None))
        logits = z
        return logits, cache

    def backward_patches(self, cache: dict, grad_logits: np.ndarray) -> list[np.ndarray]:
        """Gradients for every parameter, aligned with :meth:`parameters`."""
        train = cache["train"]
        fc_grads: list[np.ndarray] = []
        g = grad_logits
        for i in range(len(self.fcs) - 1, -1, -1):
            x, z, bn_out, mask = cache["fc"][i]
            if i < len(self.fc_bns):
                if mask is not None:
                    g = g * mask
                g = nn.relu_backward(bn_out, g)
                g, g_gamma, g_beta = self.fc_bns[i].backward(z, g, train)
                g, g_w, g_b = self.fcs[i].backward(x, g)
                fc_grads[:0] = [g_w, g_b, g_gamma, g_beta]
            else:
                g, g_w, g_b = self.fcs[i].backward(x, g)
                fc_grads[:0] = [g_w, g_b]
        grads: list[np.ndarray] = []
        f = self.config.filters_per_scale
        for s, (conv, bn) in enumerate(zip(self.scale_convs, self.scale_bns)):
            gs = g[:, s * f : (s + 1) * f]
            crop, pre, bn_out = cache["scales"][s]
            ga = nn.relu_backward(bn_out, gs)
            gz, g_gamma, g_beta = bn.backward(pre, ga, train)
            g_w = (gz.T @ crop).reshape(conv.weights.shape)
            g_b = gz.sum(axis=0)
            grads += [g_w.astype(conv.weights.dtype, copy=False), g_b.astype(conv.bias.dtype, copy=False), g_gamma, g_beta]
        return grads + fc_grads

    # --- fully convolutional path (inference) ----------------------------------

    def infer_volume_logits(self, v: Volume) -> np.ndarray:
        """Per-voxel (n, 2) logits over the whole volume (eval mode, same-padded)."""
        grid = v.grid.astype(self.dtype)[None, None]
        feats = []
        for conv, bn in zip(self.scale_convs, self.scale_bns):
            out = conv.forward(grid)
            out = bn.forward(out, train=False)
            feats.append(nn.relu(out))
        x = np.concatenate(feats, axis=1)[0]
        n = x.shape[1] * x.shape[2] * x.shape[3]
        x = np.ascontiguousarray(x.reshape(x.shape[0], n).T)
        for i, fc in enumerate(self.fcs):
            z = fc.forward(x)
            if i < len(self.fc_bns):
                x = nn.relu(self.fc_bns[i].forward(z, train=False))
        return z

    def infer_volume(self, v: Volume) -> tuple[ProbMap, LabelMap]:
        """Whole-volume foreground probabilities (eval mode, same-padded)."""
        if not self.trained:
            log.warning("inference from an untrained model; output will be near 0.5")
        logits = self.infer_volume_logits(v)
        prob = nn.softmax(logits)[:, 1].astype(np.float32)
        labels = (logits[:, 1] > logits[:, 0]).astype(np.uint8)
        return ProbMap(v.dims, prob), LabelMap(v.dims, labels)


# --- probability-guided pruning -------------------------------------------------


def prune_labels(labels: LabelMap, probs: ProbMap, zeta: float, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of kept segmentation voxels.

    A voxel survives when the predicted-class confidence ``max(p, 1-p)``
    reaches ``zeta`` and an independent uniform draw reaches ``eta``, so the
    expected kept fraction among confident voxels is ``1 - eta``.
    """
    if not (0.0 <= zeta <= 1.0 and 0.0 <= eta <= 1.0):
        raise ValidationError(f"zeta and eta must lie in [0, 1], got {zeta}, {eta}")
    if labels.dims != probs.dims:
        raise ValidationError("label dims do not match probability dims")
    conf = np.maximum(probs.prob, 1.0 - probs.prob)
    u = rng.random(conf.size)
    return (conf >= zeta) & (u >= eta)


# --- training set construction ---------------------------------------------------


@dataclass(frozen=True)
class BalanceWeights:
    """Per-class weights: |T| over the class count, for labels and scribbles."""

    alpha_f: float
    alpha_b: float
    beta_f: float
    beta_b: float
    total: int

    @classmethod
    def from_counts(cls, c_f: int, c_b: int, s_f: int, s_b: int) -> "BalanceWeights":
        total = c_f + c_b + s_f + s_b

        def ratio(count: int) -> float:
            return total / count if count > 0 else 0.0

        return cls(ratio(c_f), ratio(c_b), ratio(s_f), ratio(s_b), total)


@dataclass(frozen=True)
class SampleSet:
    """Training samples as parallel arrays (scribbles first, then kept labels)."""

    centers: np.ndarray  # int64 linear voxel indices
    labels: np.ndarray  # uint8
    weights: np.ndarray  # f64: 1 for scribbles, 1-W for segmentation labels
    class_weights: np.ndarray  # f64: beta for scribbles, alpha for labels
    balance: BalanceWeights

    def __len__(self) -> int:
        return int(self.centers.size)


def build_training_set(
    labels: LabelMap,
    kept_mask: np.ndarray,
    scribbles: ScribbleSet,
    weights: WeightMap,
) -> SampleSet:
    """One sample per scribble voxel and per kept, non-scribbled label voxel."""
    if labels.dims != weights.dims:
        raise ValidationError("label dims do not match weight map dims")
    fg = np.asarray(sorted(scribbles.foreground), dtype=np.int64)
    bg = np.asarray(sorted(scribbles.background), dtype=np.int64)
    kept = np.asarray(kept_mask, dtype=bool).copy()
    if fg.size:
        kept[fg] = False
    if bg.size:
        kept[bg] = False
    seg_idx = np.flatnonzero(kept).astype(np.int64)
    seg_labels = labels.labels[seg_idx]
    c_f = int(np.count_nonzero(seg_labels))
    c_b = int(seg_labels.size - c_f)
    balance = BalanceWeights.from_counts(c_f, c_b, int(fg.size), int(bg.size))
    if balance.total == 0:
        raise NothingToLearnError("no scribbles and no kept segmentation labels")
    centers = np.concatenate([fg, bg, seg_idx])
    sample_labels = np.concatenate([
        np.ones(fg.size, dtype=np.uint8),
        np.zeros(bg.size, dtype=np.uint8),
        seg_labels,
    ])
    sample_weights = np.concatenate([
        np.ones(fg.size + bg.size, dtype=np.float64),
        1.0 - weights.w[seg_idx],
    ])
    class_weights = np.concatenate([
        np.full(fg.size, balance.beta_f),
        np.full(bg.size, balance.beta_b),
        np.where(seg_labels == 1, balance.alpha_f, balance.alpha_b),
    ])
    return SampleSet(centers, sample_labels, sample_weights, class_weights, balance)


# --- loss -------------------------------------------------------------------------


def adaptive_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    class_weights: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Weighted, class-balanced NLL averaged over the batch, with its gradient.

    Per sample: ``-w * cw * log p(y)``.  Scribble samples carry w = 1, label
    samples w = 1 - W, so a label sample sitting on a scribble path point
    (W = 1) contributes nothing regardless of the prediction.
    """
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("non-finite logits passed to the loss")
    n = logits.shape[0]
    logp = nn.log_softmax(logits)
    rows = np.arange(n)
    coeff = np.asarray(weights, dtype=np.float64) * np.asarray(class_weights, dtype=np.float64)
    loss = float(-(coeff * logp[rows, labels]).mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= (coeff / n)[:, None]
    return loss, grad.astype(logits.dtype, copy=False)


# --- patch extraction and the two training loops -----------------------------------


def extract_patches(v: Volume, centers: np.ndarray, patch_size: int) -> np.ndarray:
    """(n, K, K, K) float32 patches centered on the given voxels, zero padded."""
    pad = patch_size // 2
    padded = np.pad(v.grid.astype(np.float32), pad)
    windows = sliding_window_view(padded, (patch_size,) * 3)
    nx, ny, _ = v.dims
    centers = np.asarray(centers, dtype=np.int64)
    xs = centers % nx
    ys = (centers // nx) % ny
    zs = centers // (nx * ny)
    return windows[zs, ys, xs]


def train_online(
    model: LikelihoodModel,
    volume: Volume,
    samples: SampleSet,
    rng: np.random.Generator,
    *,
    epochs: int | None = None,
    lr: float | None = None,
) -> list[float]:
    """SGD with cosine annealing over shuffled (mini)batches; returns the loss curve."""
    if len(samples) == 0:
        raise NothingToLearnError("empty sample set")
    cfg = model.config
    epochs = cfg.online_epochs if epochs is None else epochs
    lr0 = cfg.online_lr if lr is None else lr
    if epochs < 1:
        raise ValidationError("online training needs at least one epoch")
    patches = extract_patches(volume, samples.centers, cfg.patch_size)
    n = len(samples)
    batch = n if n <= cfg.full_batch_limit else cfg.minibatch_size
    schedule = CosineSchedule(lr0, epochs)
    params = model.parameters()
    curve: list[float] = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        lr_e = schedule.lr(epoch)
        total = 0.0
        for start in range(0, n, batch):
            sel = perm[start : start + batch]
            logits, cache = model.forward_patches(patches[sel], train=True, rng=rng)
            loss, grad = adaptive_loss(
                logits, samples.labels[sel], samples.weights[sel], samples.class_weights[sel]
            )
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            grads = model.backward_patches(cache, grad)
            nn.sgd_step(params, grads, lr_e)
            total += loss * sel.size
        curve.append(total / n)
    model.trained = True
    return curve


def pretrain_offline(
    model: LikelihoodModel,
    labeled_volumes: list[tuple[Volume, LabelMap]],
    rng: np.random.Generator,
) -> list[float]:
    """Class-balanced patch pretraining with the stepped learning-rate schedule."""
    if not labeled_volumes:
        raise ValidationError("pretraining requires at least one labeled volume")
    cfg = model.config
    usable: list[tuple[Volume, np.ndarray, np.ndarray]] = []
    for vol, lab in labeled_volumes:
        if vol.dims != lab.dims:
            raise ValidationError("volume dims do not match label dims")
        fg = np.flatnonzero(lab.labels == 1)
        bg = np.flatnonzero(lab.labels == 0)
        if fg.size == 0 or bg.size == 0:
            log.warning("skipping pretraining volume without both classes (dims %s)", vol.dims)
            continue
        usable.append((vol, fg, bg))
    if not usable:
        raise ValidationError("no pretraining volume contains both classes")
    schedule = StepSchedule(cfg.pretrain_lr, cfg.pretrain_drops)
    half = max(1, cfg.pretrain_samples_per_volume // 2)
    params = model.parameters()
    ones = np.ones(2 * half, dtype=np.float64)
    batch_labels = np.concatenate([np.ones(half, dtype=np.uint8), np.zeros(half, dtype=np.uint8)])
    curve: list[float] = []
    for epoch in range(cfg.pretrain_epochs):
        lr_e = schedule.lr(epoch)
        total = 0.0
        for vol, fg, bg in usable:
            centers = np.concatenate([rng.choice(fg, half), rng.choice(bg, half)])
            patches = extract_patches(vol, centers, cfg.patch_size)
            logits, cache = model.forward_patches(patches, train=True, rng=rng)
            loss, grad = adaptive_loss(logits, batch_labels, ones, ones)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            grads = model.backward_patches(cache, grad)
            nn.sgd_step(params, grads, lr_e)
            total += loss
        curve.append(total / len(usable))
    if cfg.pretrain_epochs > 0:
        model.trained = True
    return curve


# --- checkpointing ------------------------------------------------------------------


def _array_names(model: LikelihoodModel) -> list[str]:
    names = []
    for s in range(len(model.config.scales)):
        names += [f"conv{s}.weights", f"conv{s}.bias", f"conv{s}.bn.gamma", f"conv{s}.bn.beta"]
    for i in range(len(model.fcs)):
        names += [f"fc{i}.weights", f"fc{i}.bias"]
        if i < len(model.fc_bns):
            names += [f"fc{i}.bn.gamma", f"fc{i}.bn.beta"]
    for s in range(len(model.config.scales)):
        names += [f"conv{s}.bn.running_mean", f"conv{s}.bn.running_var"]
    for i in range(len(model.fc_bns)):
        names += [f"fc{i}.bn.running_mean", f"fc{i}.bn.running_var"]
    return names


def model_to_bytes(model: LikelihoodModel) -> bytes:
    arrays = model.parameters() + model.buffers()
    names = _array_names(model)
    manifest = {
        "format": "scribbleseg-likelihood",
        "trained": bool(model.trained),
        "config": dataclasses.asdict(model.config),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    return nn.checkpoint_bytes(manifest, arrays)


def save_model(model: LikelihoodModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def model_from_bytes(raw: bytes) -> LikelihoodModel:
    manifest, arrays = nn.checkpoint_from_bytes(raw)
    if manifest.get("format") != "scribbleseg-likelihood":
        raise ValidationError(f"not a likelihood checkpoint: {manifest.get('format')!r}")
    raw = dict(manifest["config"])
    for key in _CONFIG_TUPLE_KEYS:
        raw[key] = tuple(raw[key])
    model = LikelihoodModel(ModelConfig(**raw))
    targets = model.parameters() + model.buffers()
    if len(targets) != len(arrays):
        raise ValidationError("checkpoint array count does not match the architecture")
    for target, source in zip(targets, arrays):
        if target.shape != source.shape:
            raise ValidationError(f"checkpoint shape {source.shape} != expected {target.shape}")
        target[...] = source
    model.trained = bool(manifest["trained"])
    return model


def load_model(path) -> LikelihoodModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
