"""Model-agnostic meta-learning: inner-loop adaptation and meta-updates.

The inner loop adapts a parameter set to one task's support data with a
few plain gradient-descent steps.  The outer loop differentiates the
post-adaptation query loss with respect to the *initial* parameters; in
exact mode that differentiation flows through the inner updates (second
order), while first-order mode evaluates the gradient at the adapted
parameters and applies it to the initial ones.

Everything is functional: adaptation never modifies its inputs, and each
task runs on its own tape.  Because the gradient of a mean is the mean of
gradients, per-task meta-gradients are computed independently and
averaged in a fixed order, which keeps results identical whether tasks
are processed sequentially or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .episodes import Episode, EpisodeSpec
from .nn import (
    Conv,
    Dense,
    GlobalAvgPool,
    ModelSpec,
    OptimizerState,
    ParamSet,
    Relu,
    Scale,
    SoftmaxHead,
    adam_init,
    adam_step,
    forward,
    init_params,
)
from .rng import Rng
from .tensor import Tape, Tensor, grad, has_active_tape

__all__ = [
    "MamlConfig",
    "QueryMetrics",
    "MetaTrainLog",
    "MetaTrainResult",
    "MetaTestResult",
    "SinusoidTask",
    "adapt_on_loss",
    "inner_adapt",
    "meta_gradient_from_losses",
    "meta_gradient",
    "meta_train",
    "meta_test",
    "maml_classifier_spec",
    "sinusoid_model_spec",
    "sample_sinusoid_task",
    "sinusoid_episode",
    "sinusoid_batch_source",
    "episode_batch_source",
]

TaskArrays = tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # sx, sy, qx, qy


@dataclass(frozen=True)
class MamlConfig:
    meta_iterations: int = 60000
    meta_lr: float = 0.001
    inner_lr: float = 0.01
    inner_steps_train: int = 5
    inner_steps_test: int = 10
    task_num: int = 4
    first_order: bool = False
    episode_spec: EpisodeSpec = field(default_factory=EpisodeSpec)

    def __post_init__(self):
        if self.meta_lr <= 0 or self.inner_lr <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.inner_steps_train, self.inner_steps_test, self.meta_iterations) < 0:
            raise ValueError("step counts must be non-negative")


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------


def adapt_on_loss(
    loss_fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    steps: int,
    inner_lr: float,
    track_higher_order: bool,
) -> ParamSet:
    """Run ``steps`` full-batch gradient-descent updates on ``loss_fn``.

    With ``track_higher_order`` the update chain stays on the active tape,
    so the result remains differentiable with respect to ``params`` (an
    enclosing Tape is then required).  Otherwise updates are detached and
    the result is a set of fresh leaves.  ``params`` is never modified.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if track_higher_order and not has_active_tape():
        raise T.AutodiffError("track_higher_order=True needs an enclosing Tape")
    cur = params
    for _ in range(steps):
        loss = loss_fn(cur)
        gs = grad(loss, cur.tensors(), create_graph=track_higher_order)
        if track_higher_order:
            lr = Tensor(inner_lr)
            new = [T.sub(p, T.mul(lr, g)) for p, g in zip(cur.tensors(), gs)]
        else:
            new = [
                Tensor(p.data - inner_lr * g.data, requires_grad=True)
                for p, g in zip(cur.tensors(), gs)
            ]
        cur = cur.replace_tensors(new)
    return cur


def _support_loss_fn(
    spec: ModelSpec, sx: np.ndarray, sy: np.ndarray, loss_kind: str
) -> Callable[[ParamSet], Tensor]:
    if sx.shape[0] == 0:
        raise ValueError("support set must be non-empty")
    x = Tensor(sx)

    def fn(ps: ParamSet) -> Tensor:
        out = forward(spec, ps, x, mode="train")
        if loss_kind == "cross_entropy":
            return T.softmax_cross_entropy(out, sy)
        return T.mse_loss(out, Tensor(sy))

    return fn


def inner_adapt(
    spec: ModelSpec,
    params: ParamSet,
    support_x: np.ndarray,
    support_y: np.ndarray,
    steps: int,
    inner_lr: float,
    track_higher_order: bool = False,
    loss_kind: str = "cross_entropy",
) -> ParamSet:
    """Adapt model parameters to one support batch; functional."""
    fn = _support_loss_fn(spec, np.asarray(support_x), np.asarray(support_y), loss_kind)
    if steps == 0 or has_active_tape():
        return adapt_on_loss(fn, params, steps, inner_lr, track_higher_order)
    with Tape():
        return adapt_on_loss(fn, params, steps, inner_lr, track_higher_order)


# ---------------------------------------------------------------------------
# meta-gradient
# ---------------------------------------------------------------------------


@dataclass
class QueryMetrics:
    loss: float
    accuracy: Optional[float]
    per_task_loss: list[float]
    per_task_accuracy: list[Optional[float]]


def meta_gradient_from_losses(
    params: ParamSet,
    tasks: Sequence[tuple[Callable[[ParamSet], Tensor], Callable[[ParamSet], Tensor]]],
    inner_steps: int,
    inner_lr: float,
    first_order: bool = False,
) -> tuple[list[Tensor], list[float]]:
    """Meta-gradient of the mean query loss over (support_fn, query_fn) tasks.

    Each task runs on its own tape; per-task gradients are averaged in
    task order.  Exact mode differentiates through the inner updates;
    first-order mode evaluates the query gradient at the adapted
    parameters and reports it with respect to the initial ones.
    """
    if not tasks:
        raise ValueError("tasks must be non-empty")
    sums: Optional[list[np.ndarray]] = None
    losses: list[float] = []
    for support_fn, query_fn in tasks:
        with Tape():
            theta = adapt_on_loss(
                support_fn, params, inner_steps, inner_lr, track_higher_order=not first_order
            )
            qloss = query_fn(theta)
            wrt = theta if first_order else params
            gs = grad(qloss, wrt.tensors())
        losses.append(qloss.item())
        arrays = [g.data for g in gs]
        sums = arrays if sums is None else [s + a for s, a in zip(sums, arrays)]
    n = len(tasks)
    return [Tensor(s / n) for s in sums], losses


def _meta_gradient_arrays(
    spec: ModelSpec,
    params: ParamSet,
    batch: Sequence[TaskArrays],
    cfg: MamlConfig,
    loss_kind: str,
) -> tuple[list[Tensor], QueryMetrics]:
    if not batch:
        raise ValueError("meta-batch must be non-empty")
    sums: Optional[list[np.ndarray]] = None
    losses: list[float] = []
    accs: list[Optional[float]] = []
    for sx, sy, qx, qy in batch:
        support_fn = _support_loss_fn(spec, sx, sy, loss_kind)
        with Tape():
            theta = adapt_on_loss(
                support_fn,
                params,
                cfg.inner_steps_train,
                cfg.inner_lr,
                track_higher_order=not cfg.first_order,
            )
            qlogits = forward(spec, theta, Tensor(qx), mode="train")
            if loss_kind == "cross_entropy":
                qloss = T.softmax_cross_entropy(qlogits, qy)
            else:
                qloss = T.mse_loss(qlogits, Tensor(qy))
            wrt = theta if cfg.first_order else params
            gs = grad(qloss, wrt.tensors())
        losses.append(qloss.item())
        if loss_kind == "cross_entropy":
            accs.append(float((qlogits.data.argmax(axis=1) == qy).mean()))
        else:
            accs.append(None)
        arrays = [g.data for g in gs]
        sums = arrays if sums is None else [s + a for s, a in zip(sums, arrays)]
    n = len(batch)
    grads = [Tensor(s / n) for s in sums]
    mean_acc = None
    if loss_kind == "cross_entropy":
        mean_acc = float(np.mean([a for a in accs if a is not None]))
    metrics = QueryMetrics(
        loss=float(np.mean(losses)),
        accuracy=mean_acc,
        per_task_loss=losses,
        per_task_accuracy=accs,
    )
    return grads, metrics


def _episode_arrays(episode: Episode) -> TaskArrays:
    sx, sy = episode.support_arrays()
    qx, qy = episode.query_arrays()
    return sx, sy, qx, qy


def meta_gradient(
    spec: ModelSpec,
    params: ParamSet,
    episodes: Sequence[Episode],
    cfg: MamlConfig,
) -> tuple[list[Tensor], QueryMetrics]:
    """Meta-gradient over a batch of classification episodes."""
    batch = [_episode_arrays(ep) for ep in episodes]
    return _meta_gradient_arrays(spec, params, batch, cfg, "cross_entropy")


# ---------------------------------------------------------------------------
# meta-training
# ---------------------------------------------------------------------------


@dataclass
class LogRow:
    iteration: int
    train_query_loss: float
    train_query_acc: Optional[float]
    test_acc: Optional[float]


@dataclass
class MetaTrainLog:
    rows: list[LogRow] = field(default_factory=list)

    HEADER = "iteration,train_query_loss,train_query_acc,test_acc"

    def append(self, row: LogRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError("iteration indices must be strictly increasing")
        self.rows.append(row)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write(self.HEADER + "\n")
            for r in self.rows:
                acc = "" if r.train_query_acc is None else repr(r.train_query_acc)
                tacc = "" if r.test_acc is None else repr(r.test_acc)
                f.write(f"{r.iteration},{r.train_query_loss!r},{acc},{tacc}\n")

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class MetaTrainResult:
    params: ParamSet
    opt_state: OptimizerState
    log: MetaTrainLog
    iterations_run: int


def meta_train(
    spec: ModelSpec,
    cfg: MamlConfig,
    batch_source: Callable[[int], Sequence[TaskArrays]],
    rng: Rng,
    *,
    loss_kind: str = "cross_entropy",
    params: Optional[ParamSet] = None,
    opt_state: Optional[OptimizerState] = None,
    start_iteration: int = 0,
    eval_fn: Optional[Callable[[ParamSet], float]] = None,
    eval_every: int = 0,
    target_test_acc: Optional[float] = None,
) -> MetaTrainResult:
    """Outer loop: Adam on the meta-gradient, one meta-batch per iteration.

    ``batch_source(i)`` must return the iteration's tasks as raw arrays
    and be a pure function of ``i`` (plus its own seed), which is what
    makes checkpoint-resume produce an identical continuation.  Optional
    ``eval_fn`` runs every ``eval_every`` iterations on the post-update
    parameters; when ``target_test_acc`` is set, reaching it stops early.
    """
    if params is None:
        params = init_params(spec, rng.derive("init"))
    if opt_state is None:
        opt_state = adam_init(params, cfg.meta_lr)
    log = MetaTrainLog()
    it = start_iteration
    for it in range(start_iteration, cfg.meta_iterations):
        batch = batch_source(it)
        grads, qm = _meta_gradient_arrays(spec, params, batch, cfg, loss_kind)
        params, opt_state = adam_step(params, grads, opt_state)
        test_acc = None
        if eval_fn is not None and eval_every > 0 and (it + 1) % eval_every == 0:
            test_acc = float(eval_fn(params))
        log.append(LogRow(it, qm.loss, qm.accuracy, test_acc))
        if (
            target_test_acc is not None
            and test_acc is not None
            and test_acc >= target_test_acc
        ):
            it += 1
            break
    else:
        it = cfg.meta_iterations
    return MetaTrainResult(params=params, opt_state=opt_state, log=log, iterations_run=it)


# ---------------------------------------------------------------------------
# meta-testing
# ---------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    accuracy: float
    predictions: np.ndarray  # global class indices
    labels: np.ndarray  # global class indices


@dataclass
class MetaTestResult:
    accuracy: float
    episodes: list[EpisodeResult]


def meta_test(
    spec: ModelSpec,
    params: ParamSet,
    episodes: Sequence[Episode],
    cfg: MamlConfig,
) -> MetaTestResult:
    """Adapt on each support set, classify its queries, report mean accuracy.

    Every episode adapts a fresh clone of ``params`` for
    ``inner_steps_test`` steps, so episodes are independent.
    """
    results: list[EpisodeResult] = []
    for ep in episodes:
        sx, sy = ep.support_arrays()
        qx, qy = ep.query_arrays()
        theta0 = params.clone()
        support_fn = _support_loss_fn(spec, sx, sy, "cross_entropy")
        with Tape():
            theta = adapt_on_loss(
                support_fn, theta0, cfg.inner_steps_test, cfg.inner_lr, track_higher_order=False
            )
        qlogits = forward(spec, theta, Tensor(qx), mode="eval")
        pred_local = qlogits.data.argmax(axis=1)
        class_map = np.array(ep.class_map)
        results.append(
            EpisodeResult(
                accuracy=float((pred_local == qy).mean()),
                predictions=class_map[pred_local],
                labels=class_map[qy],
            )
        )
    return MetaTestResult(
        accuracy=float(np.mean([r.accuracy for r in results])), episodes=results
    )


# ---------------------------------------------------------------------------
# model builders and task sources
# ---------------------------------------------------------------------------


def maml_classifier_spec(
    image_size: tuple[int, int],
    n_way: int,
    channels: int = 32,
    blocks: int = 4,
) -> ModelSpec:
    """Small conv net for episode images: stride-2 conv blocks, pooled head."""
    layers: list = []
    c_in = 3
    for _ in range(blocks):
        layers.append(Conv(c_in=c_in, c_out=channels, k=3, stride=2, pad=1))
        layers.append(Relu())
        c_in = channels
    layers.append(GlobalAvgPool())
    layers.append(SoftmaxHead(classes=n_way))
    return ModelSpec(layers=tuple(layers), input_shape=(3,) + tuple(image_size))


def sinusoid_model_spec(hidden: int = 40, input_scale: float = 0.2) -> ModelSpec:
    """Two-hidden-layer ReLU regressor for the sinusoid family.

    The fixed input scaling maps x in [-5, 5] to [-1, 1]; without it the
    first layer starts saturated and inner-loop adaptation is poorly
    conditioned.
    """
    return ModelSpec(
        layers=(
            Scale(input_scale),
            Dense(1, hidden),
            Relu(),
            Dense(hidden, hidden),
            Relu(),
            Dense(hidden, 1),
        ),
        input_shape=(1,),
    )


@dataclass(frozen=True)
class SinusoidTask:
    """y = amplitude * sin(x - phase), sampled on x in U(-5, 5)."""

    amplitude: float
    phase: float

    def sample(self, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        x = rng.uniform(-5.0, 5.0, (n, 1))
        return x, self.amplitude * np.sin(x - self.phase)


def sample_sinusoid_task(
    rng: Rng,
    amplitude_range: tuple[float, float] = (0.1, 5.0),
    phase_range: tuple[float, float] = (0.0, float(np.pi)),
) -> SinusoidTask:
    return SinusoidTask(
        amplitude=float(rng.uniform(*amplitude_range)),
        phase=float(rng.uniform(*phase_range)),
    )


def sinusoid_episode(
    task: SinusoidTask, k_support: int, k_query: int, rng: Rng
) -> TaskArrays:
    if k_support < 1 or k_query < 1:
        raise ValueError("k_support and k_query must be >= 1")
    sx, sy = task.sample(k_support, rng)
    qx, qy = task.sample(k_query, rng)
    return sx, sy, qx, qy


def sinusoid_batch_source(
    rng: Rng, task_num: int, k_support: int = 10, k_query: int = 10
) -> Callable[[int], list[TaskArrays]]:
    """Iteration-indexed sinusoid meta-batches; stable under resume."""

    def source(it: int) -> list[TaskArrays]:
        out = []
        for t in range(task_num):
            sub = rng.derive(f"sinusoid:{it}:{t}")
            task = sample_sinusoid_task(sub)
            out.append(sinusoid_episode(task, k_support, k_query, sub))
        return out

    return source


def episode_batch_source(ds, spec: EpisodeSpec, task_num: int, rng: Rng):
    """Iteration-indexed classification meta-batches from a dataset."""
    from .episodes import sample_meta_batch

    def source(it: int) -> list[TaskArrays]:
        batch = sample_meta_batch(ds, spec, task_num, rng.derive(f"meta-batch:{it}"))
        return [_episode_arrays(ep) for ep in batch]

    return source
