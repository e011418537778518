"""Config-driven experiment runner.

Verbs: gen-synth, train-maml, train-transfer, grid, eval, report.  Every
command reads one INI config (see ``florashot.config``), honors --seed /
--out / --data overrides, exits 0 on success and nonzero with a single
``error: ...`` line on stderr otherwise.  The master seed fully
determines every artifact byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, default_config_text, load_config
from .data import Dataset, augment_expand, load_image_dir, split, write_manifest
from .episodes import sample_episode
from .maml import (
    episode_batch_source,
    maml_classifier_spec,
    meta_test,
    meta_train,
)
from .metrics import render_report
from .nn import OptimizerState, ParamSet, adam_init, load_params, save_params
from .rng import Rng
from .synth import ensure_disjoint, synth_generate
from .tensor import Tensor
from .transfer import (
    BackboneSpec,
    HeadSpec,
    dataset_arrays,
    evaluate_head,
    extract_features,
    fit_head,
    pretrain_backbone,
    run_tuning_grid,
)

__all__ = ["main"]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    if getattr(args, "data", None):
        updates["data_dir"] = args.data
        updates["synth"] = None
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _load_dataset(cfg: ExperimentConfig, rng: Rng) -> Dataset:
    if cfg.data_dir is not None:
        return load_image_dir(cfg.data_dir)
    return synth_generate(cfg.synth, cfg.synth_per_class, rng.derive("data"))


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _save_optimizer(path: Path, params: ParamSet, state: OptimizerState) -> None:
    entries = [("step_count", Tensor(float(state.step_count)))]
    for (name, _), m, v in zip(params.entries, state.m, state.v):
        entries.append((f"m.{name}", Tensor(m.copy())))
        entries.append((f"v.{name}", Tensor(v.copy())))
    save_params(ParamSet(entries), path)


def _load_optimizer(path: Path, params: ParamSet, lr: float) -> OptimizerState:
    blob = load_params(path, requires_grad=False)
    state = adam_init(params, lr)
    state.step_count = int(blob.get("step_count").item())
    state.m = [blob.get(f"m.{n}").data.copy() for n in params.names()]
    state.v = [blob.get(f"v.{n}").data.copy() for n in params.names()]
    return state


def _plot_lines(path: Path, series: dict, xlabel: str, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in series.items():
        if xs:
            ax.plot(xs, ys, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": "florashot"})
    plt.close(fig)


# ---------------------------------------------------------------------------
# gen-synth
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    from PIL import Image

    cfg = _apply_overrides(load_config(args.config), args)
    if cfg.synth is None:
        raise ValueError("gen-synth requires a synthetic dataset source")
    rng = Rng(cfg.seed)
    ds = synth_generate(cfg.synth, cfg.synth_per_class, rng.derive("data"))
    out = _out_dir(cfg)
    for name in ds.class_names:
        (out / name).mkdir(parents=True, exist_ok=True)
    counters = {name: 0 for name in ds.class_names}
    for img in ds.images:
        idx = counters[img.class_name]
        counters[img.class_name] += 1
        arr = np.clip(np.round(img.pixels), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(out / img.class_name / f"{idx:04d}.png")
    print(f"wrote {len(ds)} images across {len(ds.class_names)} classes to {out}")
    return 0


# ---------------------------------------------------------------------------
# train-maml
# ---------------------------------------------------------------------------


def _maml_setup(cfg: ExperimentConfig, rng: Rng):
    ds = _load_dataset(cfg, rng)
    train_ds, test_ds, val_ds = split(ds, cfg.split, rng.derive("split"))
    if cfg.use_augmentation:
        train_ds = augment_expand(train_ds, cfg.augmentation, rng.derive("augment"))
        if cfg.augmentation.augment_eval:
            test_ds = augment_expand(test_ds, cfg.augmentation, rng.derive("augment-test"))
            val_ds = augment_expand(val_ds, cfg.augmentation, rng.derive("augment-val"))
    espec = cfg.maml.episode_spec
    need = espec.k_shot + espec.k_query
    short = [
        train_ds.class_names[i] for i, n in enumerate(train_ds.class_counts()) if n < need
    ]
    if short:
        raise ValueError(
            f"dataset too small for episode spec: classes {short} have fewer "
            f"than {need} training images"
        )
    model = maml_classifier_spec(
        espec.image_size, espec.n_way, channels=cfg.maml_channels, blocks=cfg.maml_blocks
    )
    return train_ds, test_ds, val_ds, espec, model


def cmd_train_maml(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    rng = Rng(cfg.seed)
    train_ds, test_ds, val_ds, espec, model = _maml_setup(cfg, rng)
    out = _out_dir(cfg)
    write_manifest(out / "manifest.txt", {"train": train_ds, "test": test_ds, "val": val_ds})

    ckpt_path = out / "maml_checkpoint.params"
    optim_path = out / "maml_checkpoint.optim"
    state_path = out / "maml_checkpoint.json"
    csv_path = out / "maml_log.csv"

    params = None
    opt_state = None
    start_iteration = 0
    if args.resume:
        if not state_path.exists():
            raise FileNotFoundError(f"cannot resume: {state_path} does not exist")
        meta = json.loads(state_path.read_text())
        start_iteration = int(meta["iteration"])
        params = load_params(ckpt_path)
        opt_state = _load_optimizer(optim_path, params, cfg.maml.meta_lr)

    eval_fn = None
    if cfg.maml_eval_every > 0:
        probe_rng = rng.derive("probe-episodes")

        def eval_fn(ps):
            episodes = [
                sample_episode(test_ds, espec, probe_rng.derive(f"probe:{i}"))
                for i in range(cfg.maml_eval_episodes)
            ]
            return meta_test(model, ps, episodes, cfg.maml).accuracy

    result = meta_train(
        model,
        cfg.maml,
        episode_batch_source(train_ds, espec, cfg.maml.task_num, rng.derive("train-episodes")),
        rng,
        params=params,
        opt_state=opt_state,
        start_iteration=start_iteration,
        eval_fn=eval_fn,
        eval_every=cfg.maml_eval_every,
        target_test_acc=cfg.maml_target_test_acc,
    )

    save_params(result.params, ckpt_path)
    _save_optimizer(optim_path, result.params, result.opt_state)
    _write_json(
        state_path,
        {
            "kind": "maml",
            "iteration": result.iterations_run,
            "seed": cfg.seed,
            "n_way": espec.n_way,
            "k_shot": espec.k_shot,
            "k_query": espec.k_query,
            "image_size": list(espec.image_size),
            "channels": cfg.maml_channels,
            "blocks": cfg.maml_blocks,
        },
    )
    # one cumulative CSV across resume segments
    if not args.resume or not csv_path.exists():
        csv_path.write_text(result.log.HEADER + "\n")
    with open(csv_path, "a", newline="\n") as f:
        for r in result.log.rows:
            acc = "" if r.train_query_acc is None else repr(r.train_query_acc)
            tacc = "" if r.test_acc is None else repr(r.test_acc)
            f.write(f"{r.iteration},{r.train_query_loss!r},{acc},{tacc}\n")

    rows = result.log.rows
    _plot_lines(
        out / "maml_accuracy.png",
        {
            "train query acc": (
                [r.iteration for r in rows if r.train_query_acc is not None],
                [r.train_query_acc for r in rows if r.train_query_acc is not None],
            ),
            "test acc": (
                [r.iteration for r in rows if r.test_acc is not None],
                [r.test_acc for r in rows if r.test_acc is not None],
            ),
        },
        "meta-step",
        "accuracy",
    )
    print(
        f"meta-trained {result.iterations_run - start_iteration} iterations "
        f"(total {result.iterations_run}); artifacts in {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# train-transfer and grid
# ---------------------------------------------------------------------------


def _transfer_setup(cfg: ExperimentConfig, rng: Rng):
    ds = _load_dataset(cfg, rng)
    train_ds, test_ds, val_ds = split(ds, cfg.split, rng.derive("split"))
    if cfg.use_augmentation:
        train_ds = augment_expand(train_ds, cfg.augmentation, rng.derive("augment"))
        if cfg.augmentation.augment_eval:
            test_ds = augment_expand(test_ds, cfg.augmentation, rng.derive("augment-test"))
            val_ds = augment_expand(val_ds, cfg.augmentation, rng.derive("augment-val"))

    size = cfg.transfer_image_size
    backbone = BackboneSpec(image_size=size, channels=cfg.backbone_channels)
    if cfg.synth is not None:
        pretext_spec = cfg.synth.disjoint_variant()
        ensure_disjoint(cfg.synth, pretext_spec)
    else:
        from .synth import SyntheticFloraSpec

        pretext_spec = SyntheticFloraSpec(image_size=size[0], name_prefix="pretext")
    pretext = synth_generate(pretext_spec, cfg.pretrain_per_class, rng.derive("pretext"))
    bb_params = pretrain_backbone(
        backbone,
        pretext,
        epochs=cfg.pretrain_epochs,
        rng=rng.derive("pretrain"),
        target_class_names=train_ds.class_names,
    )
    return train_ds, test_ds, val_ds, backbone, bb_params


def _prefixed(prefix: str, ps: ParamSet) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}{n}", t) for n, t in ps.entries]


def cmd_train_transfer(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    rng = Rng(cfg.seed)
    train_ds, test_ds, val_ds, backbone, bb_params = _transfer_setup(cfg, rng)
    out = _out_dir(cfg)
    write_manifest(out / "manifest.txt", {"train": train_ds, "test": test_ds, "val": val_ds})

    size = cfg.transfer_image_size
    x_train, y_train = dataset_arrays(train_ds, size)
    x_val, y_val = dataset_arrays(val_ds, size)
    checksum_before = bb_params.checksum()
    f_train = extract_features(backbone, bb_params, x_train)
    f_val = extract_features(backbone, bb_params, x_val)

    head = HeadSpec(
        feature_dim=backbone.feature_dim,
        hidden=cfg.head_hidden,
        dropout=cfg.transfer.dropout,
        classes=len(train_ds.class_names),
    )
    head_params, history = fit_head(
        head, f_train, y_train, cfg.transfer, f_val, y_val, rng.derive("fit-head")
    )
    checksum_after = bb_params.checksum()

    combined = ParamSet(_prefixed("backbone.", bb_params) + _prefixed("head.", head_params))
    save_params(combined, out / "transfer_checkpoint.params")
    _write_json(
        out / "transfer_checkpoint.json",
        {
            "kind": "transfer",
            "seed": cfg.seed,
            "classes": list(train_ds.class_names),
            "image_size": list(size),
            "backbone_channels": list(cfg.backbone_channels),
            "head_hidden": cfg.head_hidden,
            "dropout": cfg.transfer.dropout,
            "backbone_checksum_before": checksum_before,
            "backbone_checksum_after": checksum_after,
            "frozen": cfg.transfer.freeze_backbone,
        },
    )
    with open(out / "transfer_history.csv", "w", newline="\n") as f:
        f.write("epoch,train_loss,val_loss,val_accuracy\n")
        for e, (tl, vl, va) in enumerate(
            zip(history.train_loss, history.val_loss, history.val_accuracy)
        ):
            f.write(f"{e},{tl!r},{vl!r},{va!r}\n")
    print(
        f"trained head for {len(history)} epochs "
        f"(final val acc {history.val_accuracy[-1]:.4f}); artifacts in {out}"
    )
    return 0


def cmd_grid(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if not cfg.grid:
        raise ValueError("config has no [grid] configs")
    rng = Rng(cfg.seed)
    train_ds, test_ds, val_ds, backbone, bb_params = _transfer_setup(cfg, rng)
    out = _out_dir(cfg)
    size = cfg.transfer_image_size
    x_train, y_train = dataset_arrays(train_ds, size)
    x_val, y_val = dataset_arrays(val_ds, size)
    f_train = extract_features(backbone, bb_params, x_train)
    f_val = extract_features(backbone, bb_params, x_val)
    head = HeadSpec(
        feature_dim=backbone.feature_dim,
        hidden=cfg.head_hidden,
        classes=len(train_ds.class_names),
    )
    results = run_tuning_grid(
        cfg.grid, head, f_train, y_train, f_val, y_val, rng.derive("grid")
    )
    with open(out / "grid_results.csv", "w", newline="\n") as f:
        f.write("index,learning_rate,dropout,l2,val_accuracy,selected\n")
        for r in results:
            f.write(
                f"{r.index},{r.config.lr!r},{r.config.dropout!r},"
                f"{r.config.l2_lambda!r},{r.val_accuracy!r},{int(r.selected)}\n"
            )
    best = next(r for r in results if r.selected)
    print(
        f"grid of {len(results)} configs; selected index {best.index} "
        f"(val acc {best.val_accuracy:.4f}); results in {out / 'grid_results.csv'}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval and report
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    rng = Rng(cfg.seed)
    ckpt = Path(args.checkpoint)
    meta_path = ckpt.with_suffix(".json")
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint metadata {meta_path} not found")
    meta = json.loads(meta_path.read_text())
    out = _out_dir(cfg)

    ds = _load_dataset(cfg, rng)
    train_ds, test_ds, val_ds = split(ds, cfg.split, rng.derive("split"))
    eval_ds = {"test": test_ds, "val": val_ds}[args.split]

    if meta["kind"] == "maml":
        espec = cfg.maml.episode_spec
        if list(espec.image_size) != meta["image_size"] or espec.n_way != meta["n_way"]:
            raise ValueError(
                "checkpoint episode geometry does not match the config "
                f"({meta['image_size']}/{meta['n_way']}-way vs "
                f"{list(espec.image_size)}/{espec.n_way}-way)"
            )
        model = maml_classifier_spec(
            espec.image_size, espec.n_way, channels=meta["channels"], blocks=meta["blocks"]
        )
        params = load_params(ckpt)
        er = rng.derive(f"eval-episodes:{args.split}")
        episodes = [
            sample_episode(eval_ds, espec, er.derive(f"e:{i}"))
            for i in range(args.episodes)
        ]
        result = meta_test(model, params, episodes, cfg.maml)
        preds = np.concatenate([r.predictions for r in result.episodes])
        labels = np.concatenate([r.labels for r in result.episodes])
        artifacts = render_report(
            out / f"maml_{args.split}", preds, labels, len(ds.class_names), ds.class_names
        )
        print(
            f"meta-test accuracy {result.accuracy:.4f} over {args.episodes} episodes "
            f"(adaptation steps {cfg.maml.inner_steps_test}); report at {artifacts['text']}"
        )
        return 0

    if meta["kind"] == "transfer":
        size = tuple(meta["image_size"])
        backbone = BackboneSpec(image_size=size, channels=tuple(meta["backbone_channels"]))
        head = HeadSpec(
            feature_dim=backbone.feature_dim,
            hidden=meta["head_hidden"],
            dropout=meta["dropout"],
            classes=len(meta["classes"]),
        )
        combined = load_params(ckpt)
        bb_params = ParamSet(
            [(n[len("backbone.") :], t) for n, t in combined.entries if n.startswith("backbone.")]
        )
        head_params = ParamSet(
            [(n[len("head.") :], t) for n, t in combined.entries if n.startswith("head.")]
        )
        x, y = dataset_arrays(eval_ds, size)
        feats = extract_features(backbone, bb_params, x)
        acc, preds = evaluate_head(head, head_params, feats, y)
        artifacts = render_report(
            out / f"transfer_{args.split}", preds, y, len(ds.class_names), ds.class_names
        )
        print(f"classification accuracy {acc:.4f} on {args.split}; report at {artifacts['text']}")
        return 0

    raise ValueError(f"unknown checkpoint kind {meta['kind']!r}")


def cmd_report(args) -> int:
    rows = Path(args.predictions).read_text().strip().splitlines()
    if rows and rows[0].lower().replace(" ", "") in ("label,prediction", "true,pred"):
        rows = rows[1:]
    labels, preds = [], []
    for line in rows:
        a, b = line.split(",")
        labels.append(int(a))
        preds.append(int(b))
    n_classes = max(max(labels), max(preds)) + 1 if labels else 0
    names = args.classes.split(",") if args.classes else None
    if names and len(names) > n_classes:
        n_classes = len(names)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    artifacts = render_report(out / "predictions", preds, labels, n_classes, names)
    print(f"report written: {artifacts['text']}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment config file")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--data", default=None, help="override with an image-tree dataset dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="florashot",
        description="few-shot learning laboratory",
        epilog="Config template:\n\n" + default_config_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic class-per-directory PNG tree")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("train-maml", help="meta-train and checkpoint a MAML model")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.set_defaults(fn=cmd_train_maml)

    p = sub.add_parser("train-transfer", help="pretrain backbone, freeze, fit head")
    _add_common(p)
    p.set_defaults(fn=cmd_train_transfer)

    p = sub.add_parser("grid", help="sweep transfer configs and select the best")
    _add_common(p)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write the report trio")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["test", "val"], default="test")
    p.add_argument("--episodes", type=int, default=100, help="episodes for MAML evaluation")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="render metrics from a label,prediction CSV")
    p.add_argument("--predictions", required=True, help="CSV of label,prediction rows")
    p.add_argument("--classes", default=None, help="comma-separated class names")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single machine-parsable error line
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
