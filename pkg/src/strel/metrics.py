"""Ranking metrics and the pseudo-label audit.

Evaluation mirrors predicate classification over given pairs: every pair in
a scene is scored by its best foreground probability (background never
enters the ranking), the top-K predictions per scene are intersected with
the hidden ground truth, and per-class recalls aggregate across the split.
All reported values are percentages in [0, 100].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .classifier import ModelParams, predict_probs
from .errors import ValidationError
from .labels import BG_INDEX, Dataset, Scene

GROUP_NAMES = ("head", "body", "tail")


@dataclass(frozen=True)
class ScenePredictions:
    """Per-pair predicted foreground class, ranking score, and hidden truth."""

    pred_classes: np.ndarray
    scores: np.ndarray
    hidden: np.ndarray


def scene_predictions(
    params: ModelParams, scene: Scene, features: np.ndarray | None = None
) -> ScenePredictions:
    X = scene.feature_matrix() if features is None else features
    if X.shape[0] == 0:
        empty = np.zeros(0, dtype=np.intp)
        return ScenePredictions(empty, np.zeros(0), empty)
    probs = predict_probs(params, X)
    fg = probs[:, 1:]
    pred = 1 + np.argmax(fg, axis=1)
    scores = fg.max(axis=1)
    hidden = np.array([t.hidden_label for t in scene.triplets], dtype=np.intp)
    return ScenePredictions(pred.astype(np.intp), scores, hidden)


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score; ties keep the lower pair index."""
    idx = np.arange(len(scores))
    return np.lexsort((idx, -np.asarray(scores, dtype=np.float64)))


def recall_at_k(scenes: Sequence[ScenePredictions], k: int) -> float:
    """Mean over scenes of |top-k correct| / |ground truth|, as a percentage."""
    if k <= 0:
        raise ValidationError("k must be positive")
    vals = []
    for sp in scenes:
        gt = sp.hidden != BG_INDEX
        n_gt = int(gt.sum())
        if n_gt == 0:
            continue
        top = rank_order(sp.scores)[:k]
        hits = sum(
            1
            for i in top
            if sp.hidden[i] != BG_INDEX and sp.pred_classes[i] == sp.hidden[i]
        )
        vals.append(hits / n_gt)
    if not vals:
        raise ValidationError("no ground-truth relations in any scene")
    return 100.0 * float(np.mean(vals))


def per_class_recall_at_k(
    scenes: Sequence[ScenePredictions], k: int, n_foreground: int
) -> np.ndarray:
    """Recall per foreground class across the split; nan where no truth exists."""
    if k <= 0:
        raise ValidationError("k must be positive")
    total = np.zeros(n_foreground)
    hit = np.zeros(n_foreground)
    for sp in scenes:
        top = set(int(i) for i in rank_order(sp.scores)[:k])
        for i, h in enumerate(sp.hidden):
            if h == BG_INDEX:
                continue
            total[h - 1] += 1
            if i in top and sp.pred_classes[i] == h:
                hit[h - 1] += 1
    out = np.full(n_foreground, np.nan)
    mask = total > 0
    out[mask] = 100.0 * hit[mask] / total[mask]
    return out


def mean_recall_at_k(scenes: Sequence[ScenePredictions], k: int, n_foreground: int) -> float:
    """Unweighted mean of per-class recall over classes with ground truth."""
    per_class = per_class_recall_at_k(scenes, k, n_foreground)
    if np.all(np.isnan(per_class)):
        raise ValidationError("mean recall is undefined without any ground truth")
    return float(np.nanmean(per_class))


def f_at_k(recall: float, mean_recall: float) -> float:
    """Harmonic mean of overall and per-class-mean recall; 0 when both are 0."""
    if recall < 0.0 or mean_recall < 0.0:
        raise ValidationError("recall values must be non-negative")
    if recall == 0.0 and mean_recall == 0.0:
        return 0.0
    return 2.0 * recall * mean_recall / (recall + mean_recall)


def tercile_groups(n_foreground: int) -> dict[str, np.ndarray]:
    """Head/body/tail class-rank groups by near-equal thirds of the ranking."""
    chunks = np.array_split(np.arange(n_foreground), 3)
    return dict(zip(GROUP_NAMES, chunks))


@dataclass(frozen=True)
class KMetrics:
    k: int
    recall: float
    mean_recall: float
    f_score: float
    per_class: np.ndarray
    group_recall: dict[str, float]


@dataclass(frozen=True)
class EvalReport:
    split: str
    rows: tuple[KMetrics, ...]

    def row_for(self, k: int) -> KMetrics:
        for row in self.rows:
            if row.k == k:
                return row
        raise KeyError(k)


def evaluate(
    params: ModelParams,
    dataset: Dataset,
    ks: Sequence[int] = (2, 5, 10),
    edge_learner=None,
) -> EvalReport:
    """Score a dataset split.

    With ``edge_learner`` given, pair features are first refreshed by one
    message-passing round over the deterministically gated edges
    (score > 0.5); no sampling noise enters evaluation.
    """
    preds = []
    for scene in dataset.scenes:
        features = None
        if edge_learner is not None and scene.triplets:
            from .edges import edge_scores, message_pass  # cycle-free local import

            ents = scene.entity_by_id()
            xs = np.stack([ents[t.subject_id].features for t in scene.triplets])
            xo = np.stack([ents[t.object_id].features for t in scene.triplets])
            flags = (edge_scores(edge_learner, xs, xo) > 0.5).astype(int)
            features = message_pass(scene, flags)
        preds.append(scene_predictions(params, scene, features))

    n_fg = dataset.catalog.n_foreground
    groups = tercile_groups(n_fg)
    rows = []
    for k in ks:
        r = recall_at_k(preds, k)
        per_class = per_class_recall_at_k(preds, k, n_fg)
        if np.all(np.isnan(per_class)):
            raise ValidationError("mean recall is undefined without any ground truth")
        mr = float(np.nanmean(per_class))
        group_recall = {}
        for name, idx in groups.items():
            vals = per_class[idx]
            group_recall[name] = (
                float(np.nanmean(vals)) if not np.all(np.isnan(vals)) else float("nan")
            )
        rows.append(
            KMetrics(
                k=int(k),
                recall=r,
                mean_recall=mr,
                f_score=f_at_k(r, mr),
                per_class=per_class,
                group_recall=group_recall,
            )
        )
    return EvalReport(split=dataset.split, rows=tuple(rows))


@dataclass(frozen=True)
class AssignmentRecord:
    """One accepted pseudo-label, as logged by the self-training loop."""

    iteration: int
    scene_id: int
    triplet_index: int
    assigned_class: int
    confidence: float


@dataclass(frozen=True)
class PseudoLabelAudit:
    """Pseudo-label quality against the generator's hidden truth.

    An assignment is correct iff its class equals the hidden label.
    Assignments landing on true-background pairs count toward the per-class
    denominator and the ``bg_violations`` tally, never toward correctness.
    Recall divides correct assignments by the recoverable pool: unannotated
    pairs whose hidden label is that class.
    """

    assigned: np.ndarray
    correct: np.ndarray
    bg_violations: int
    recoverable: np.ndarray

    @property
    def precision(self) -> np.ndarray:
        out = np.full(len(self.assigned), np.nan)
        mask = self.assigned > 0
        out[mask] = self.correct[mask] / self.assigned[mask]
        return out

    @property
    def recall(self) -> np.ndarray:
        out = np.full(len(self.assigned), np.nan)
        mask = self.recoverable > 0
        out[mask] = self.correct[mask] / self.recoverable[mask]
        return out

    @property
    def overall_precision(self) -> float:
        total = int(self.assigned.sum())
        return float(self.correct.sum() / total) if total else float("nan")


def audit_pseudo_labels(
    assignments: Iterable[AssignmentRecord], dataset: Dataset
) -> PseudoLabelAudit:
    scenes = dataset.scene_by_id()
    n_fg = dataset.catalog.n_foreground
    assigned = np.zeros(n_fg, dtype=np.int64)
    correct = np.zeros(n_fg, dtype=np.int64)
    bg_violations = 0
    for a in assignments:
        scene = scenes.get(a.scene_id)
        if scene is None:
            raise ValidationError(f"assignment references unknown scene {a.scene_id}")
        if not 0 <= a.triplet_index < len(scene.triplets):
            raise ValidationError(
                f"assignment references missing pair {a.triplet_index} in scene {a.scene_id}"
            )
        if not 1 <= a.assigned_class <= n_fg:
            raise ValidationError(f"not a foreground class: {a.assigned_class}")
        t = scene.triplets[a.triplet_index]
        assigned[a.assigned_class - 1] += 1
        if t.hidden_label == a.assigned_class:
            correct[a.assigned_class - 1] += 1
        elif t.hidden_label == BG_INDEX:
            bg_violations += 1
    recoverable = np.zeros(n_fg, dtype=np.int64)
    for t in dataset.iter_triplets():
        if t.observed_label == BG_INDEX and t.hidden_label != BG_INDEX:
            recoverable[t.hidden_label - 1] += 1
    return PseudoLabelAudit(
        assigned=assigned,
        correct=correct,
        bg_violations=bg_violations,
        recoverable=recoverable,
    )
