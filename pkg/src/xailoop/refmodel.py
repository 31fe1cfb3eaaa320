"""Black-box model-adapter contract plus a small built-in classifier.

The built-in model is conv(3x3x3 -> F) -> ReLU -> global average pool ->
dropout -> linear -> softmax, written in plain numpy so training is
bit-deterministic and gradients are exact. It stands in for large
pretrained networks while keeping dropout, learning rate and batch size
meaningful, and exposes the final conv layer for heat-map explanations.
"""
from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import map_coordinates

from .errors import (
    BadClassIndex,
    BadParameter,
    EmptyDataset,
    ExplainerBackendError,
    NonFiniteLoss,
    ShapeMismatch,
)
from .imaging import RgbImage


class ClassLabel(str, Enum):
    """Cancer intrinsic subtypes used as classification targets."""

    BASAL = "Basal"
    HER2 = "Her2"
    LUMINAL_A = "LuminalA"
    LUMINAL_B = "LuminalB"
    NORMAL = "Normal"


FIVE_CLASSES = (
    ClassLabel.BASAL,
    ClassLabel.HER2,
    ClassLabel.LUMINAL_A,
    ClassLabel.LUMINAL_B,
    ClassLabel.NORMAL,
)
# 4-class experiments keep Her2; 3-class drops Her2 and Normal
FOUR_CLASSES = FIVE_CLASSES[:4]
THREE_CLASSES = (ClassLabel.BASAL, ClassLabel.LUMINAL_A, ClassLabel.LUMINAL_B)


def class_subset(n: int) -> tuple[ClassLabel, ...]:
    if n == 3:
        return THREE_CLASSES
    if n == 4:
        return FOUR_CLASSES
    if n == 5:
        return FIVE_CLASSES
    raise BadParameter(f"active class subsets have size 3, 4 or 5, got {n}")


@runtime_checkable
class ModelAdapter(Protocol):
    """Behavioral contract consumed by the optimizer and the explainers.

    ``grad_cam_tap`` is None when the backing model cannot expose final
    conv activations and gradients, so the capability is declared absent
    rather than failing silently.
    """

    classes: Sequence[str]
    grad_cam_tap: Optional[Callable]

    def predict_proba(self, images: Sequence[RgbImage]) -> np.ndarray: ...


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    dropout_rate: float
    learning_rate: float
    batch_size: int
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise BadParameter(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.learning_rate < 0.0:
            raise BadParameter(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise BadParameter(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise BadParameter(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class RefModel:
    """Weights of the built-in classifier."""

    conv_w: np.ndarray  # (F, 3, 3, 3) = (maps, in channels, kh, kw)
    conv_b: np.ndarray  # (F,)
    lin_w: np.ndarray  # (C, F)
    lin_b: np.ndarray  # (C,)
    input_side: int
    classes: tuple[str, ...]

    @property
    def feature_maps(self) -> int:
        return self.conv_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.lin_w.shape[0]

    def copy(self) -> "RefModel":
        return RefModel(
            conv_w=self.conv_w.copy(),
            conv_b=self.conv_b.copy(),
            lin_w=self.lin_w.copy(),
            lin_b=self.lin_b.copy(),
            input_side=self.input_side,
            classes=self.classes,
        )


def init_model(
    classes: int | Sequence[str],
    seed: int = 0,
    feature_maps: int = 8,
    input_side: int = 32,
) -> RefModel:
    """Seeded uniform(-r, r) init with r = 1/sqrt(fan-in); zero biases."""
    if isinstance(classes, int):
        names: tuple[str, ...] = tuple(f"class{i}" for i in range(classes))
    else:
        names = tuple(str(c) for c in classes)
    if len(names) < 2:
        raise BadParameter(f"need at least 2 classes, got {len(names)}")
    if feature_maps < 1 or input_side < 8:
        raise BadParameter("feature_maps must be >=1 and input_side >=8")
    rng = np.random.default_rng(seed)
    r_conv = 1.0 / np.sqrt(27.0)
    conv_w = rng.uniform(-r_conv, r_conv, size=(feature_maps, 3, 3, 3))
    r_lin = 1.0 / np.sqrt(feature_maps)
    lin_w = rng.uniform(-r_lin, r_lin, size=(len(names), feature_maps))
    return RefModel(
        conv_w=conv_w,
        conv_b=np.zeros(feature_maps),
        lin_w=lin_w,
        lin_b=np.zeros(len(names)),
        input_side=input_side,
        classes=names,
    )


def preprocess(image: RgbImage, side: int) -> np.ndarray:
    """Bilinear resample to side x side, channels-first floats in [-1, 1]."""
    if image.height == side and image.width == side:
        arr = image.pixels.astype(np.float64)
    else:
        sy = (np.arange(side, dtype=np.float64) + 0.5) * image.height / side - 0.5
        sx = (np.arange(side, dtype=np.float64) + 0.5) * image.width / side - 0.5
        gy, gx = np.meshgrid(sy, sx, indexing="ij")
        arr = np.stack(
            [
                map_coordinates(
                    image.pixels[..., c].astype(np.float64),
                    [gy, gx],
                    order=1,
                    mode="nearest",
                )
                for c in range(3)
            ],
            axis=-1,
        )
    return np.moveaxis(arr, -1, 0) / 127.5 - 1.0


def _im2col(x: np.ndarray) -> tuple[np.ndarray, int, int]:
    """(N, 3, S, S) -> (N, P, 27) patches for a valid 3x3 convolution."""
    win = sliding_window_view(x, (3, 3), axis=(2, 3))  # (N, 3, h, w, 3, 3)
    n, _, h, w = win.shape[0], win.shape[1], win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, 27), h, w


@dataclass
class ForwardResult:
    probs: np.ndarray  # (N, C)
    logits: np.ndarray  # (N, C)
    conv_pre: np.ndarray  # (N, F, h, w) pre-ReLU
    conv_act: np.ndarray  # (N, F, h, w) post-ReLU
    pooled: np.ndarray  # (N, F)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(
    model: RefModel,
    batch: np.ndarray,
    dropout_rate: float = 0.0,
    dropout_mask: np.ndarray | None = None,
) -> ForwardResult:
    """Run the network on preprocessed inputs (N, 3, S, S).

    Inverted dropout: at train time the pooled vector is masked and scaled
    by 1/(1-p); inference applies no scaling, so ``dropout_mask`` must only
    be passed while training.
    """
    if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2] != model.input_side:
        raise ShapeMismatch(f"expected (N, 3, {model.input_side}, {model.input_side})")
    cols, h, w = _im2col(batch)
    f = model.feature_maps
    pre = cols @ model.conv_w.reshape(f, 27).T + model.conv_b  # (N, P, F)
    act = np.maximum(pre, 0.0)
    pooled = act.mean(axis=1)  # (N, F)
    dropped = pooled
    if dropout_mask is not None:
        if dropout_mask.shape != pooled.shape:
            raise ShapeMismatch("dropout mask shape mismatch")
        dropped = pooled * dropout_mask / (1.0 - dropout_rate)
    logits = dropped @ model.lin_w.T + model.lin_b
    n = batch.shape[0]
    return ForwardResult(
        probs=_softmax(logits),
        logits=logits,
        conv_pre=pre.transpose(0, 2, 1).reshape(n, f, h, w),
        conv_act=act.transpose(0, 2, 1).reshape(n, f, h, w),
        pooled=dropped,
    )


def forward(
    model: RefModel,
    image: RgbImage | np.ndarray,
    dropout_rate: float = 0.0,
    dropout_mask: np.ndarray | None = None,
) -> ForwardResult:
    x = image if isinstance(image, np.ndarray) else preprocess(image, model.input_side)
    mask = None if dropout_mask is None else dropout_mask[None, :]
    res = forward_batch(model, x[None], dropout_rate, mask)
    return res


def analytic_gradients(
    model: RefModel, image: RgbImage | np.ndarray, target_class: int
) -> dict[str, np.ndarray]:
    """Exact gradients of the target-class logit (inference mode).

    ``conv_pre`` is the gradient with respect to the pre-ReLU conv maps, so
    activations clamped at zero receive zero gradient.
    """
    if not 0 <= target_class < model.num_classes:
        raise BadClassIndex(f"class index {target_class} out of range")
    x = image if isinstance(image, np.ndarray) else preprocess(image, model.input_side)
    res = forward_batch(model, x[None])
    f = model.feature_maps
    h, w = res.conv_pre.shape[2], res.conv_pre.shape[3]
    n_spatial = h * w
    d_pooled = model.lin_w[target_class]  # (F,)
    gate = (res.conv_pre[0] > 0).astype(np.float64)  # (F, h, w)
    d_pre = gate * (d_pooled / n_spatial)[:, None, None]
    cols, _, _ = _im2col(x[None])  # (1, P, 27)
    d_pre_flat = d_pre.reshape(f, n_spatial)  # (F, P)
    d_conv_w = (d_pre_flat @ cols[0]).reshape(model.conv_w.shape)
    d_conv_b = d_pre_flat.sum(axis=1)
    d_lin_w = np.zeros_like(model.lin_w)
    d_lin_w[target_class] = res.pooled[0]
    d_lin_b = np.zeros_like(model.lin_b)
    d_lin_b[target_class] = 1.0
    return {
        "conv_pre": d_pre,
        "conv_w": d_conv_w,
        "conv_b": d_conv_b,
        "lin_w": d_lin_w,
        "lin_b": d_lin_b,
    }


def grad_cam_tap(
    model: RefModel, image: RgbImage, target_class: int
) -> tuple[np.ndarray, np.ndarray]:
    """(post-ReLU conv maps, gradient of the target logit w.r.t. them)."""
    if not 0 <= target_class < model.num_classes:
        raise BadClassIndex(f"class index {target_class} out of range")
    res = forward(model, image)
    act = res.conv_act[0]
    n_spatial = act.shape[1] * act.shape[2]
    grads = np.broadcast_to(
        (model.lin_w[target_class] / n_spatial)[:, None, None], act.shape
    ).copy()
    return act, grads


@dataclass
class EpochStats:
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


def _eval_batch(model: RefModel, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    res = forward_batch(model, x)
    p_true = np.clip(res.probs[np.arange(len(y)), y], 1e-12, None)
    loss = float(-np.log(p_true).mean())
    acc = float((res.probs.argmax(axis=1) == y).mean())
    return loss, acc


def train_model(
    train_set: Sequence[tuple[RgbImage, str]],
    val_set: Sequence[tuple[RgbImage, str]],
    config: TrainConfig,
    classes: Sequence[str],
    feature_maps: int = 8,
    input_side: int = 32,
) -> tuple[RefModel, list[EpochStats]]:
    """Mini-batch SGD on cross-entropy; returns the best-validation snapshot.

    Fully deterministic given (dataset order, config): the shuffle stream,
    dropout stream and init all derive from ``config.seed``.
    """
    if not train_set:
        raise EmptyDataset("empty training set")
    if not val_set:
        raise EmptyDataset("empty validation set")
    if config.batch_size > len(train_set):
        raise BadParameter("batch_size exceeds training-set size")
    names = tuple(str(c) for c in classes)
    index = {c: i for i, c in enumerate(names)}
    model = init_model(names, seed=config.seed, feature_maps=feature_maps, input_side=input_side)
    xtr = np.stack([preprocess(img, input_side) for img, _ in train_set])
    ytr = np.array([index[str(lbl)] for _, lbl in train_set])
    xval = np.stack([preprocess(img, input_side) for img, _ in val_set])
    yval = np.array([index[str(lbl)] for _, lbl in val_set])

    shuffle_rng = np.random.default_rng((config.seed, 1))
    drop_rng = np.random.default_rng((config.seed, 2))
    lr, p = config.learning_rate, config.dropout_rate
    n = len(train_set)
    history: list[EpochStats] = []
    best: RefModel | None = None
    best_acc = -1.0
    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        ep_loss, ep_correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = xtr[idx], ytr[idx]
            b = len(idx)
            mask = (
                (drop_rng.random((b, model.feature_maps)) >= p).astype(np.float64)
                if p > 0
                else None
            )
            with np.errstate(over="ignore", invalid="ignore"):
                res = forward_batch(model, xb, p, mask)
                p_true = res.probs[np.arange(b), yb]
                loss = float(-np.log(np.clip(p_true, 1e-300, None)).mean())
            if not np.isfinite(loss) or not np.all(np.isfinite(res.probs)):
                raise NonFiniteLoss(f"loss diverged at lr={lr}")
            ep_loss += loss * b
            ep_correct += int((res.probs.argmax(axis=1) == yb).sum())

            d_logits = res.probs.copy()
            d_logits[np.arange(b), yb] -= 1.0
            d_logits /= b
            d_lin_w = d_logits.T @ res.pooled
            d_lin_b = d_logits.sum(axis=0)
            d_dropped = d_logits @ model.lin_w  # (b, F)
            if mask is not None:
                d_pooled = d_dropped * mask / (1.0 - p)
            else:
                d_pooled = d_dropped
            f = model.feature_maps
            h, w = res.conv_pre.shape[2], res.conv_pre.shape[3]
            n_spatial = h * w
            gate = res.conv_pre > 0
            d_pre = gate * (d_pooled / n_spatial)[:, :, None, None]
            cols, _, _ = _im2col(xb)  # (b, P, 27)
            d_pre_flat = d_pre.reshape(b, f, n_spatial)
            d_conv_w = np.einsum("bfp,bpk->fk", d_pre_flat, cols).reshape(model.conv_w.shape)
            d_conv_b = d_pre_flat.sum(axis=(0, 2))

            model.conv_w -= lr * d_conv_w
            model.conv_b -= lr * d_conv_b
            model.lin_w -= lr * d_lin_w
            model.lin_b -= lr * d_lin_b
            if not np.all(np.isfinite(model.lin_w)) or not np.all(np.isfinite(model.conv_w)):
                raise NonFiniteLoss(f"weights diverged at lr={lr}")

        val_loss, val_acc = _eval_batch(model, xval, yval)
        history.append(
            EpochStats(
                train_loss=ep_loss / n,
                train_accuracy=ep_correct / n,
                val_loss=val_loss,
                val_accuracy=val_acc,
            )
        )
        if val_acc > best_acc:
            best_acc = val_acc
            best = model.copy()
    assert best is not None
    return best, history


class RefModelAdapter:
    """ModelAdapter over a built-in model."""

    def __init__(self, model: RefModel):
        self.model = model
        self.classes = model.classes

    def predict_proba(self, images: Sequence[RgbImage]) -> np.ndarray:
        if not images:
            return np.zeros((0, self.model.num_classes))
        batch = np.stack([preprocess(img, self.model.input_side) for img in images])
        return forward_batch(self.model, batch).probs

    def grad_cam_tap(self, image: RgbImage, target_class: int):
        return grad_cam_tap(self.model, image, target_class)


def save_checkpoint(model: RefModel, path: str | Path) -> None:
    doc = {
        "format": "refmodel-v1",
        "classes": list(model.classes),
        "inputSide": model.input_side,
        "featureMaps": model.feature_maps,
        "convW": model.conv_w.ravel().tolist(),
        "convB": model.conv_b.tolist(),
        "linW": model.lin_w.ravel().tolist(),
        "linB": model.lin_b.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> RefModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "refmodel-v1":
        raise BadParameter(f"unknown checkpoint format in {path}")
    f = int(doc["featureMaps"])
    classes = tuple(doc["classes"])
    return RefModel(
        conv_w=np.array(doc["convW"]).reshape(f, 3, 3, 3),
        conv_b=np.array(doc["convB"]),
        lin_w=np.array(doc["linW"]).reshape(len(classes), f),
        lin_b=np.array(doc["linB"]),
        input_side=int(doc["inputSide"]),
        classes=classes,
    )


class SubprocessAdapter:
    """Adapter for external models speaking line-delimited JSON.

    Each request is one line ``{"op": "predict", "images": [paths]}``; the
    reply line is ``{"probs": [[...]]}``. Images are written as PNGs into a
    scratch directory owned by the caller.
    """

    def __init__(self, cmd: Sequence[str], classes: Sequence[str], scratch_dir: str | Path):
        self.cmd = list(cmd)
        self.classes = tuple(classes)
        self.scratch = Path(scratch_dir)
        self.grad_cam_tap = None
        self._proc: subprocess.Popen | None = None
        self._counter = 0

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
            )
        return self._proc

    def predict_proba(self, images: Sequence[RgbImage]) -> np.ndarray:
        from .imaging import encode_image

        self.scratch.mkdir(parents=True, exist_ok=True)
        paths = []
        for img in images:
            p = self.scratch / f"q{self._counter:06d}.png"
            p.write_bytes(encode_image(img))
            paths.append(str(p))
            self._counter += 1
        proc = self._ensure()
        try:
            proc.stdin.write(json.dumps({"op": "predict", "images": paths}) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
            reply = json.loads(line)
        except (OSError, ValueError) as exc:
            raise ExplainerBackendError(f"subprocess adapter failed: {exc}") from exc
        probs = np.asarray(reply["probs"], dtype=np.float64)
        if probs.shape != (len(images), len(self.classes)):
            raise ExplainerBackendError(f"bad probs shape {probs.shape}")
        return probs

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
        self._proc = None
