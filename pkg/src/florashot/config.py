"""Experiment configuration: a flat, sectioned key-value file.

The file format is INI-style with one section per concern.  Keys follow
the hyperparameter tables of the experiments they configure (rescale,
rotation_range, meta_learning_rate, update_step, ...), so a table row
maps one-to-one onto a config line.  Every command accepts ``--seed``,
``--out`` and ``--data`` overrides on top of the file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .data import AugmentationConfig, SplitSpec
from .episodes import EpisodeSpec
from .maml import MamlConfig
from .nn import EarlyStoppingConfig
from .synth import SyntheticFloraSpec
from .transfer import BackboneSpec, TransferConfig

__all__ = ["ExperimentConfig", "load_config", "default_config_text"]


def _parse_number(text: str) -> float:
    """Accept plain floats and fraction notation like '1/255'."""
    text = text.strip()
    if "/" in text:
        return float(Fraction(text))
    return float(text)


@dataclass
class ExperimentConfig:
    seed: int = 42
    out_dir: str = "runs"
    # exactly one dataset source
    data_dir: Optional[str] = None
    synth: Optional[SyntheticFloraSpec] = None
    synth_per_class: int = 80
    split: SplitSpec = field(default_factory=SplitSpec)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    use_augmentation: bool = False
    maml: MamlConfig = field(default_factory=MamlConfig)
    maml_channels: int = 32
    maml_blocks: int = 4
    maml_eval_every: int = 0
    maml_eval_episodes: int = 20
    maml_target_test_acc: Optional[float] = None
    transfer: TransferConfig = field(default_factory=TransferConfig)
    backbone_channels: tuple[int, ...] = (16, 32, 32)
    head_hidden: int = 64
    pretrain_epochs: int = 15
    pretrain_per_class: int = 80
    transfer_image_size: tuple[int, int] = (224, 224)
    grid: list[TransferConfig] = field(default_factory=list)

    def __post_init__(self):
        if (self.data_dir is None) == (self.synth is None):
            raise ValueError("config needs exactly one dataset source (directory or synthetic)")


def _get(cp: configparser.ConfigParser, section: str, key: str, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return _parse_number(raw)
    return raw


def load_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise FileNotFoundError(f"config file {path} not found")

    # [dataset]
    source = _get(cp, "dataset", "source", "synthetic").strip()
    data_dir = None
    synth = None
    per_class = 80
    if source == "directory":
        data_dir = _get(cp, "dataset", "data_dir", "")
        if not data_dir:
            raise ValueError("dataset source 'directory' needs data_dir")
    elif source == "synthetic":
        synth = SyntheticFloraSpec(
            n_classes=_get(cp, "dataset", "classes", 5),
            image_size=_get(cp, "dataset", "image_size", 64),
            hue_jitter=_get(cp, "dataset", "hue_jitter", SyntheticFloraSpec().hue_jitter),
            noise_level=_get(cp, "dataset", "noise_level", SyntheticFloraSpec().noise_level),
            clutter=_get(cp, "dataset", "clutter", SyntheticFloraSpec().clutter),
        )
        per_class = _get(cp, "dataset", "per_class", 80)
    else:
        raise ValueError(f"unknown dataset source {source!r}")

    # [split]
    counts = None
    if _get(cp, "split", "subset_mode", False):
        counts = (
            _get(cp, "split", "train_count", 25),
            _get(cp, "split", "test_count", 5),
            _get(cp, "split", "val_count", 25),
        )
    split = SplitSpec(
        train_frac=_get(cp, "split", "train_frac", 0.70),
        test_frac=_get(cp, "split", "test_frac", 0.25),
        val_frac=_get(cp, "split", "val_frac", 0.05),
        counts=counts,
    )

    # [augmentation]
    aug_defaults = AugmentationConfig()
    target = _get(cp, "augmentation", "target_size", aug_defaults.target_size[0])
    augmentation = AugmentationConfig(
        rescale=_get(cp, "augmentation", "rescale", aug_defaults.rescale),
        rotation_range_deg=_get(cp, "augmentation", "rotation_range", aug_defaults.rotation_range_deg),
        width_shift_frac=_get(cp, "augmentation", "width_shift_range", aug_defaults.width_shift_frac),
        height_shift_frac=_get(cp, "augmentation", "height_shift_range", aug_defaults.height_shift_frac),
        shear_range=_get(cp, "augmentation", "shear_range", aug_defaults.shear_range),
        zoom_range=_get(cp, "augmentation", "zoom_range", aug_defaults.zoom_range),
        horizontal_flip=_get(cp, "augmentation", "horizontal_flip", aug_defaults.horizontal_flip),
        fill_mode=_get(cp, "augmentation", "fill_mode", aug_defaults.fill_mode),
        target_size=(int(target), int(target)),
        expansion_factor=_get(cp, "augmentation", "expansion_factor", aug_defaults.expansion_factor),
        augment_eval=_get(cp, "augmentation", "augment_eval", aug_defaults.augment_eval),
    )
    use_augmentation = _get(cp, "augmentation", "enabled", False)

    # [maml] (keys follow the hyperparameter table naming)
    m = MamlConfig()
    img = _get(cp, "maml", "image_size", 84)
    espec = EpisodeSpec(
        n_way=_get(cp, "maml", "n_way", 5),
        k_shot=_get(cp, "maml", "k_shot", 1),
        k_query=_get(cp, "maml", "k_query", 15),
        image_size=(int(img), int(img)),
    )
    target_acc = None
    if cp.has_option("maml", "target_test_acc"):
        target_acc = _parse_number(cp.get("maml", "target_test_acc"))
    maml = MamlConfig(
        meta_iterations=_get(cp, "maml", "epochs", m.meta_iterations),
        meta_lr=_get(cp, "maml", "meta_learning_rate", m.meta_lr),
        inner_lr=_get(cp, "maml", "update_learning_rate", m.inner_lr),
        inner_steps_train=_get(cp, "maml", "update_step", m.inner_steps_train),
        inner_steps_test=_get(cp, "maml", "update_step_test", m.inner_steps_test),
        task_num=_get(cp, "maml", "task_number", m.task_num),
        first_order=_get(cp, "maml", "first_order", m.first_order),
        episode_spec=espec,
    )

    # [transfer] (keys follow the tuning table naming)
    t = TransferConfig()
    transfer = TransferConfig(
        lr=_get(cp, "transfer", "learning_rate", t.lr),
        optimizer=_get(cp, "transfer", "optimizer", t.optimizer).lower(),
        dropout=_get(cp, "transfer", "dropout", t.dropout),
        l2_lambda=_get(cp, "transfer", "l2", t.l2_lambda),
        early_stopping=EarlyStoppingConfig(
            patience=_get(cp, "transfer", "patience", 10),
            min_delta=_get(cp, "transfer", "min_delta", 1e-4),
        ),
        freeze_backbone=_get(cp, "transfer", "freeze_backbone", True),
        max_epochs=_get(cp, "transfer", "max_epochs", t.max_epochs),
        batch_size=_get(cp, "transfer", "batch_size", t.batch_size),
    )
    backbone_channels = tuple(
        int(v) for v in _get(cp, "transfer", "backbone_channels", "16,32,32").split(",")
    )
    tsize = _get(cp, "transfer", "image_size", 224)

    # [grid]: one config per line, "lr:dropout:l2" triples
    grid: list[TransferConfig] = []
    if cp.has_option("grid", "configs"):
        for item in cp.get("grid", "configs").split(","):
            item = item.strip()
            if not item:
                continue
            lr_s, drop_s, l2_s = item.split(":")
            grid.append(
                TransferConfig(
                    lr=_parse_number(lr_s),
                    dropout=_parse_number(drop_s),
                    l2_lambda=_parse_number(l2_s),
                    early_stopping=transfer.early_stopping,
                    max_epochs=transfer.max_epochs,
                    batch_size=transfer.batch_size,
                )
            )

    return ExperimentConfig(
        seed=_get(cp, "run", "seed", 42),
        out_dir=_get(cp, "run", "out_dir", "runs"),
        data_dir=data_dir,
        synth=synth,
        synth_per_class=per_class,
        split=split,
        augmentation=augmentation,
        use_augmentation=use_augmentation,
        maml=maml,
        maml_channels=_get(cp, "maml", "channels", 32),
        maml_blocks=_get(cp, "maml", "blocks", 4),
        maml_eval_every=_get(cp, "maml", "eval_every", 0),
        maml_eval_episodes=_get(cp, "maml", "eval_episodes", 20),
        maml_target_test_acc=target_acc,
        transfer=transfer,
        backbone_channels=backbone_channels,
        head_hidden=_get(cp, "transfer", "head_hidden", 64),
        pretrain_epochs=_get(cp, "transfer", "pretrain_epochs", 15),
        pretrain_per_class=_get(cp, "transfer", "pretrain_per_class", 80),
        transfer_image_size=(int(tsize), int(tsize)),
        grid=grid,
    )


def default_config_text() -> str:
    """A commented template config, handy for `--help` and docs."""
    return """\
[run]
seed = 42
out_dir = runs

[dataset]
source = synthetic          ; synthetic | directory
; data_dir = /path/to/class-per-directory-tree
classes = 5
per_class = 80
image_size = 64

[split]
train_frac = 0.70
test_frac = 0.25
val_frac = 0.05
subset_mode = false
train_count = 25
test_count = 5
val_count = 25

[augmentation]
enabled = false
rescale = 1/255
rotation_range = 40
width_shift_range = 0.2
height_shift_range = 0.2
shear_range = 0.2
zoom_range = 0.2
horizontal_flip = true
fill_mode = nearest
target_size = 224
expansion_factor = 10
augment_eval = false

[maml]
epochs = 60000
image_size = 84
k_query = 15
k_shot = 1
meta_learning_rate = 0.001
n_way = 5
task_number = 4
update_learning_rate = 0.01
update_step = 5
update_step_test = 10
first_order = false
channels = 32
blocks = 4
eval_every = 0
eval_episodes = 20

[transfer]
learning_rate = 0.0001
optimizer = adam
dropout = 0.7
l2 = 2e-6
patience = 10
min_delta = 1e-4
freeze_backbone = true
max_epochs = 2000
batch_size = 0
backbone_channels = 16,32,32
head_hidden = 64
pretrain_epochs = 15
pretrain_per_class = 80
image_size = 224

[grid]
configs = 0.0001:0.7:2e-6, 0.001:0.5:2e-6
"""
