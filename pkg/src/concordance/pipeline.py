"""In-memory building blocks of the teacher -> pseudo-label -> student loop.

The CLI stages and the synthetic benchmark both go through these functions.
The benchmark keeps everything in memory; the CLI round-trips through disk
(float32 point clouds), so its numbers are close to, not equal to, the
benchmark's.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence as Seq

import numpy as np

from concordance.concord import FusionConfig, PseudoDataset, PseudoLabels, TeacherOutput, assemble_dataset, fuse_scan, select
from concordance.errors import ConfigError
from concordance.evalkit import ConfusionMatrix, IoUResult, metrics_report, miou
from concordance.featnet import (
    ModelSpec,
    PointBatch,
    TrainConfig,
    init_model,
    predict,
    predict_batch,
    reference_neighborhoods,
    train,
)
from concordance.seqcloud import Sequence, align_sequence
from concordance.stindex import NeighborhoodBatch, RadiusFn
from concordance.synthlab import (
    CLASS_NAMES,
    SyntheticTeacherSpec,
    WorldConfig,
    generate_dataset,
    make_concordance,
    make_ensemble,
    synth_teacher_predict,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StudentConfig:
    past: int = 2
    hidden: tuple = (32, 32)
    width: int = 32
    r0: float = 1.0
    slope: float = 0.5
    max_neighbors: Optional[int] = 8
    time_scale: float = 1.0
    init_seed: int = 0

    @property
    def radius(self) -> RadiusFn:
        return RadiusFn(self.r0, self.slope)

    def init(self, num_classes: int, future: int = 0) -> ModelSpec:
        return init_model(
            self.past, future, num_classes, self.init_seed, self.hidden, self.width,
            self.radius, self.time_scale, self.max_neighbors,
        )


def split_labeled(seqs: Seq[Sequence], labeled_fraction: float) -> tuple[list[Sequence], list[Sequence]]:
    """First ``labeled_fraction`` of the sequences are human-labelled, the rest unlabelled."""
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ConfigError("labeled_fraction must lie in [0, 1]")
    n_lab = int(round(labeled_fraction * len(seqs)))
    return list(seqs[:n_lab]), list(seqs[n_lab:])


def teach(teachers: Seq[SyntheticTeacherSpec], seqs: Seq[Sequence]) -> dict[str, list[TeacherOutput]]:
    return {s.sequence_id: [synth_teacher_predict(t, s) for t in teachers] for s in seqs}


def fuse(outputs: Mapping[str, Seq[TeacherOutput]], fusion: FusionConfig) -> dict[str, PseudoLabels]:
    return {sid: fuse_scan(list(outs), fusion) for sid, outs in outputs.items()}


def reselect(pseudo: Mapping[str, PseudoLabels], theta: float) -> dict[str, PseudoLabels]:
    return {sid: select(pl, theta) for sid, pl in pseudo.items()}


class NeighborhoodCache:
    """Reference-scan neighbourhoods keyed by sequence id, for one model geometry."""

    def __init__(self, template: ModelSpec):
        self.template = template
        self._cache: dict[str, NeighborhoodBatch] = {}

    def get(self, seq: Sequence) -> NeighborhoodBatch:
        nb = self._cache.get(seq.sequence_id)
        if nb is None:
            nb = reference_neighborhoods(self.template, align_sequence(seq))
            self._cache[seq.sequence_id] = nb
        return nb


def training_batch(dataset: PseudoDataset, seqs: Mapping[str, Sequence], cache: NeighborhoodCache) -> PointBatch:
    """Neighbourhood rows of every selected point; Don't Care points are dropped."""
    parts = []
    ts = cache.template.time_scale
    for sample in dataset:
        nb = cache.get(seqs[sample.sequence_id])
        full = PointBatch.from_neighborhoods(nb, sample.labels, sample.confidences, ts)
        ids = np.nonzero(sample.mask)[0]
        if len(ids):
            parts.append(full.subset(ids))
    return PointBatch.concat(parts)


def evaluate(model: ModelSpec, seqs: Seq[Sequence], num_classes: int, cache: Optional[NeighborhoodCache] = None) -> ConfusionMatrix:
    cm = ConfusionMatrix.zeros(num_classes)
    for s in seqs:
        if cache is not None:
            nb = cache.get(s)
            batch = PointBatch.from_neighborhoods(nb, s.reference.semantic_labels, None, model.time_scale)
            probs = predict_batch(model, batch)
        else:
            probs = predict(model, s)
        cm = cm + ConfusionMatrix.from_labels(s.reference.semantic_labels, probs.argmax(axis=1), num_classes)
    return cm


def ground_truth_labels(seqs: Seq[Sequence]) -> dict[str, np.ndarray]:
    return {s.sequence_id: s.reference.semantic_labels for s in seqs}


def fit_student(
    student: StudentConfig,
    dataset: PseudoDataset,
    seqs: Mapping[str, Sequence],
    train_cfg: TrainConfig,
    num_classes: int,
    cache: Optional[NeighborhoodCache] = None,
) -> tuple[ModelSpec, list[float]]:
    model = student.init(num_classes)
    cache = cache or NeighborhoodCache(model)
    return train(model, training_batch(dataset, seqs, cache), train_cfg)


# --- synthetic benchmark ------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    world: WorldConfig = field(
        default_factory=lambda: WorldConfig(
            num_static=4, num_vehicles=2, num_pedestrians=3, points_per_object=40, ground_points=150, extent=8.0
        )
    )
    num_sequences: int = 50
    num_test: int = 20
    labeled_fraction: float = 0.2
    teacher: SyntheticTeacherSpec = field(
        default_factory=lambda: SyntheticTeacherSpec(2, base_error=0.99, range_gain=0.33)
    )
    concordance_ranges: tuple = (1, 2, 3)
    single_range: int = 2
    ensemble_range: int = 2
    ensemble_count: int = 3
    fusion: FusionConfig = field(default_factory=FusionConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=30, batch_size=256, learning_rate=0.05, schedule="cosine")
    )


class Benchmark:
    """One seed of the synthetic benchmark with shared data and neighbourhood caches."""

    def __init__(self, cfg: BenchmarkConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        world = dataclasses.replace(cfg.world, seed=seed)
        train_seqs = generate_dataset(world, cfg.num_sequences, prefix="train")
        test_world = dataclasses.replace(cfg.world, seed=seed + 10_000)
        self.test = generate_dataset(test_world, cfg.num_test, prefix="test")
        self.labeled, self.unlabeled = split_labeled(train_seqs, cfg.labeled_fraction)
        self.by_id = {s.sequence_id: s for s in train_seqs}
        self.num_classes = world.num_classes
        student = dataclasses.replace(cfg.student, init_seed=seed)
        self.student = student
        self.cache = NeighborhoodCache(student.init(self.num_classes))
        self.train_cfg = dataclasses.replace(cfg.train, seed=seed)

    def teachers(self, kind: str) -> list[SyntheticTeacherSpec]:
        base = dataclasses.replace(self.cfg.teacher, seed=self.seed * 100)
        if kind == "concordance":
            return make_concordance(self.cfg.concordance_ranges, base)
        if kind == "single":
            return make_concordance([self.cfg.single_range], base)
        if kind == "ensemble":
            seeds = [base.seed + 50 + i for i in range(self.cfg.ensemble_count)]
            return make_ensemble(self.cfg.ensemble_range, self.cfg.ensemble_count, seeds, base)
        raise ConfigError(f"unknown teacher kind {kind!r}")

    def pseudo_labels(self, kind: str, fusion: Optional[FusionConfig] = None) -> dict[str, PseudoLabels]:
        return fuse(teach(self.teachers(kind), self.unlabeled), fusion or self.cfg.fusion)

    def run_student(self, pseudo: Optional[Mapping[str, PseudoLabels]] = None) -> IoUResult:
        dataset = assemble_dataset(ground_truth_labels(self.labeled), pseudo or {})
        model, _ = fit_student(self.student, dataset, self.by_id, self.train_cfg, self.num_classes, self.cache)
        return miou(evaluate(model, self.test, self.num_classes, self.cache))


def benchmark_report(result: IoUResult, **extra) -> dict:
    return metrics_report(result, CLASS_NAMES, **extra)
