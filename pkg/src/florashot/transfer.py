"""Transfer-learning baseline: pretrain a backbone, freeze it, fit a head.

The backbone is a small conv stack ending in global average pooling,
pretrained on a pretext class family whose generative parameters are
disjoint from the target classes.  After pretraining the backbone is kept
frozen as a feature extractor and only the dropout-regularized head is
trained on the target task, with cross-entropy plus an L2 weight penalty
and early stopping on validation loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, resize_array
from .nn import (
    Conv,
    Dense,
    Dropout,
    EarlyStoppingConfig,
    GlobalAvgPool,
    ModelSpec,
    ParamSet,
    Relu,
    SoftmaxHead,
    adam_init,
    adam_step,
    check_early_stop,
    forward,
    init_params,
    l2_penalty,
)
from .rng import Rng
from .tensor import Tape, Tensor, grad

__all__ = [
    "BackboneSpec",
    "HeadSpec",
    "TransferConfig",
    "GridResult",
    "dataset_arrays",
    "pretrain_backbone",
    "extract_features",
    "fit_head",
    "evaluate_head",
    "run_tuning_grid",
]


@dataclass(frozen=True)
class BackboneSpec:
    """Conv stack ending in global average pooling; emits flat features."""

    image_size: tuple[int, int] = (64, 64)
    channels: tuple[int, ...] = (16, 32, 32)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def model_spec(self) -> ModelSpec:
        layers: list = []
        c_in = 3
        for c in self.channels:
            layers.append(Conv(c_in=c_in, c_out=c, k=3, stride=2, pad=1))
            layers.append(Relu())
            c_in = c
        layers.append(GlobalAvgPool())
        return ModelSpec(layers=tuple(layers), input_shape=(3,) + tuple(self.image_size))

    def with_head(self, n_classes: int) -> ModelSpec:
        base = self.model_spec()
        return ModelSpec(
            layers=base.layers + (SoftmaxHead(classes=n_classes),),
            input_shape=base.input_shape,
        )

    def param_prefixes(self) -> list[str]:
        """Parameter name prefixes belonging to the backbone proper."""
        return [f"{i}." for i in range(2 * len(self.channels))]


@dataclass(frozen=True)
class HeadSpec:
    """Dense + ReLU + dropout + softmax classifier over backbone features."""

    feature_dim: int
    hidden: int = 64
    dropout: float = 0.7
    classes: int = 5

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            layers=(
                Dense(self.feature_dim, self.hidden),
                Relu(),
                Dropout(self.dropout),
                SoftmaxHead(classes=self.classes),
            ),
            input_shape=(self.feature_dim,),
        )


@dataclass(frozen=True)
class TransferConfig:
    lr: float = 0.0001
    optimizer: str = "adam"
    dropout: float = 0.7
    l2_lambda: float = 2e-6
    early_stopping: EarlyStoppingConfig = field(default_factory=EarlyStoppingConfig)
    freeze_backbone: bool = True
    max_epochs: int = 2000
    batch_size: int = 0  # 0 = full batch

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2 lambda must be non-negative")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


def dataset_arrays(
    ds: Dataset, image_size: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Stack a dataset into ([N,3,H,W] unit-range images, [N] labels)."""
    xs = []
    for img in ds.images:
        px = resize_array(img.pixels, image_size[0], image_size[1])
        if img.value_range == "raw":
            px = px / 255.0
        xs.append(px.transpose(2, 0, 1))
    return np.ascontiguousarray(np.stack(xs)), np.array([im.label for im in ds.images])


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)


def _train_classifier(
    spec: ModelSpec,
    params: ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: TransferConfig,
    rng: Rng,
    trainable: Optional[Sequence[str]] = None,
) -> tuple[ParamSet, TrainHistory]:
    """Adam + cross-entropy + L2 with early stopping on validation loss.

    ``trainable`` restricts updates to parameters with those name
    prefixes; the rest stay bit-identical.
    """
    if x.shape[0] == 0:
        raise ValueError("training set must be non-empty")
    if val_x.shape[0] == 0:
        raise ValueError("validation set must be non-empty")
    names = params.names()
    if trainable is None:
        active = [True] * len(names)
    else:
        active = [any(n.startswith(p) for p in trainable) for n in names]
    active_params = ParamSet([e for e, a in zip(params.entries, active) if a])
    frozen = [e for e, a in zip(params.entries, active) if not a]
    state = adam_init(active_params, cfg.lr)
    history = TrainHistory()

    def full_params(active_ps: ParamSet) -> ParamSet:
        merged = dict(frozen) | dict(active_ps.entries)
        return ParamSet([(n, merged[n]) for n in names])

    n = x.shape[0]
    for epoch in range(cfg.max_epochs):
        erng = rng.derive(f"epoch:{epoch}")
        if cfg.batch_size and cfg.batch_size < n:
            order = erng.permutation(n)
            batches = [
                order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)
            ]
        else:
            batches = [np.arange(n)]
        epoch_losses = []
        for bi, idx in enumerate(batches):
            brng = erng.derive(f"batch:{bi}")
            with Tape():
                logits = forward(
                    spec, full_params(active_params), Tensor(x[idx]), mode="train", rng=brng
                )
                loss = T.add(
                    T.softmax_cross_entropy(logits, y[idx]),
                    l2_penalty(active_params, cfg.l2_lambda),
                )
                gs = grad(loss, active_params.tensors())
            epoch_losses.append(loss.item())
            active_params, state = adam_step(active_params, gs, state)
        val_logits = forward(spec, full_params(active_params), Tensor(val_x), mode="eval")
        val_loss = T.softmax_cross_entropy(val_logits, val_y).item()
        history.train_loss.append(float(np.mean(epoch_losses)))
        history.val_loss.append(val_loss)
        history.val_accuracy.append(float((val_logits.data.argmax(axis=1) == val_y).mean()))
        if check_early_stop(history.val_loss, cfg.early_stopping):
            break
    return full_params(active_params), history


def pretrain_backbone(
    backbone: BackboneSpec,
    pretext: Dataset,
    epochs: int,
    rng: Rng,
    *,
    target_class_names: Optional[Sequence[str]] = None,
    lr: float = 0.001,
    batch_size: int = 32,
) -> ParamSet:
    """Train backbone + throwaway head on the pretext task; return backbone params.

    Raises when the pretext classes overlap the target class names.
    """
    if target_class_names is not None:
        overlap = set(pretext.class_names) & set(target_class_names)
        if overlap:
            raise ValueError(f"pretext and target classes overlap: {sorted(overlap)}")
    full_spec = backbone.with_head(len(pretext.class_names))
    params = init_params(full_spec, rng.derive("init"))
    if epochs > 0:
        x, y = dataset_arrays(pretext, backbone.image_size)
        # small holdout only to satisfy the trainer's early-stopping input
        n_val = max(1, len(y) // 10)
        order = rng.derive("holdout").permutation(len(y))
        tr, va = order[n_val:], order[:n_val]
        cfg = TransferConfig(
            lr=lr,
            dropout=0.0,
            l2_lambda=0.0,
            max_epochs=epochs,
            batch_size=batch_size,
            early_stopping=EarlyStoppingConfig(patience=max(3, epochs), min_delta=0.0),
        )
        params, _ = _train_classifier(
            full_spec, params, x[tr], y[tr], x[va], y[va], cfg, rng.derive("pretrain")
        )
    return params.subset(backbone.param_prefixes())


def extract_features(
    backbone: BackboneSpec, params: ParamSet, images: np.ndarray
) -> np.ndarray:
    """Eval-mode forward through the frozen backbone; [n, feature_dim]."""
    spec = backbone.model_spec()
    out = forward(spec, params, Tensor(images), mode="eval")
    return out.data


def fit_head(
    head: HeadSpec,
    features: np.ndarray,
    labels: np.ndarray,
    cfg: TransferConfig,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    rng: Rng,
) -> tuple[ParamSet, TrainHistory]:
    """Fit the classifier head on extracted features."""
    spec = head.model_spec()
    params = init_params(spec, rng.derive("head-init"))
    return _train_classifier(
        spec, params, features, labels, val_features, val_labels, cfg, rng.derive("head")
    )


def evaluate_head(
    head: HeadSpec, params: ParamSet, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Deterministic eval-mode accuracy and predictions."""
    logits = forward(head.model_spec(), params, Tensor(features), mode="eval")
    preds = logits.data.argmax(axis=1)
    return float((preds == labels).mean()), preds


@dataclass
class GridResult:
    index: int
    config: TransferConfig
    val_accuracy: float
    selected: bool = False


def run_tuning_grid(
    configs: Sequence[TransferConfig],
    head_template: HeadSpec,
    features: np.ndarray,
    labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    rng: Rng,
) -> list[GridResult]:
    """Train one head per config with identical seeding; pick the best.

    Ties break toward the lowest config index, so permuting the input
    order never changes the selected (config, accuracy) pair.
    """
    if not configs:
        raise ValueError("grid needs at least one configuration")
    results = []
    for i, cfg in enumerate(configs):
        head = HeadSpec(
            feature_dim=head_template.feature_dim,
            hidden=head_template.hidden,
            dropout=cfg.dropout,
            classes=head_template.classes,
        )
        params, history = fit_head(
            head, features, labels, cfg, val_features, val_labels, rng.derive("grid")
        )
        acc, _ = evaluate_head(head, params, val_features, val_labels)
        results.append(GridResult(index=i, config=cfg, val_accuracy=acc))
    best = max(results, key=lambda r: (r.val_accuracy, -r.index))
    best.selected = True
    return results
