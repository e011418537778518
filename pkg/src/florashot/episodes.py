"""N-way K-shot episode construction: support sets, query sets, meta-batches.

An episode draws ``n_way`` distinct classes, then ``k_shot + k_query``
images per class without replacement; support and query therefore never
share a source image.  Episode-local labels are a random permutation of
the chosen classes, so the local label of a global class carries no
information.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, resize_array
from .rng import Rng

__all__ = ["EpisodeSpec", "Episode", "sample_episode", "sample_meta_batch"]


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    k_query: int = 15
    image_size: tuple[int, int] = (84, 84)

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError("n_way must be >= 2")
        if self.k_shot < 1 or self.k_query < 1:
            raise ValueError("k_shot and k_query must be >= 1")


@dataclass
class Episode:
    """One few-shot task: (image, local label) pairs plus the class map.

    Images are [3, H, W] float64 arrays in [0, 1].  ``class_map[local]``
    gives the global class index.  ``support_sources``/``query_sources``
    hold dataset indices, used to assert support/query disjointness.
    """

    support: list[tuple[np.ndarray, int]]
    query: list[tuple[np.ndarray, int]]
    class_map: list[int]
    support_sources: list[int] = field(default_factory=list)
    query_sources: list[int] = field(default_factory=list)

    def validate(self, spec: EpisodeSpec) -> None:
        if len(set(self.class_map)) != spec.n_way:
            raise ValueError("episode must cover n_way distinct global classes")
        for items, k, kind in (
            (self.support, spec.k_shot, "support"),
            (self.query, spec.k_query, "query"),
        ):
            counts = np.bincount([lbl for _, lbl in items], minlength=spec.n_way)
            if len(items) != spec.n_way * k or not np.all(counts == k):
                raise ValueError(f"{kind} set must hold exactly {k} items per class")
        if set(self.support_sources) & set(self.query_sources):
            raise ValueError("support and query share a source image")

    def support_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        xs = np.stack([x for x, _ in self.support])
        ys = np.array([y for _, y in self.support])
        return xs, ys

    def query_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        xs = np.stack([x for x, _ in self.query])
        ys = np.array([y for _, y in self.query])
        return xs, ys


def _episode_image(ds: Dataset, index: int, spec: EpisodeSpec) -> np.ndarray:
    img = ds.images[index]
    px = resize_array(img.pixels, spec.image_size[0], spec.image_size[1])
    if img.value_range == "raw":
        px = px / 255.0
    return np.ascontiguousarray(px.transpose(2, 0, 1))


def sample_episode(ds: Dataset, spec: EpisodeSpec, rng: Rng) -> Episode:
    """Draw one episode; classes and per-class images without replacement."""
    groups = ds.by_class()
    n_classes = len(groups)
    if n_classes < spec.n_way:
        raise ValueError(
            f"dataset has {n_classes} classes, episode needs {spec.n_way}"
        )
    need = spec.k_shot + spec.k_query
    chosen = rng.choice(n_classes, size=spec.n_way, replace=False)
    # local labels are a random permutation of the chosen classes
    order = rng.permutation(spec.n_way)
    class_map = [int(chosen[i]) for i in order]

    support, query = [], []
    support_src, query_src = [], []
    for local, global_cls in enumerate(class_map):
        pool = groups[global_cls]
        if len(pool) < need:
            raise ValueError(
                f"class {ds.class_names[global_cls]!r} has {len(pool)} images, "
                f"episode needs {need}"
            )
        picks = rng.choice(len(pool), size=need, replace=False)
        for j in picks[: spec.k_shot]:
            idx = pool[int(j)]
            support.append((_episode_image(ds, idx, spec), local))
            support_src.append(idx)
        for j in picks[spec.k_shot :]:
            idx = pool[int(j)]
            query.append((_episode_image(ds, idx, spec), local))
            query_src.append(idx)

    ep = Episode(
        support=support,
        query=query,
        class_map=class_map,
        support_sources=support_src,
        query_sources=query_src,
    )
    ep.validate(spec)
    return ep


def sample_meta_batch(
    ds: Dataset, spec: EpisodeSpec, task_num: int, rng: Rng
) -> list[Episode]:
    """``task_num`` independent episodes, each from its own sub-stream."""
    if task_num < 1:
        raise ValueError("task_num must be >= 1")
    return [
        sample_episode(ds, spec, rng.derive(f"episode:{i}")) for i in range(task_num)
    ]
