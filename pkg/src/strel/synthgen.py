"""Synthetic long-tailed relation benchmark.

Scenes are built from disjoint subject-object pairs: every pair owns its two
entities, so a pair's features (its endpoint features concatenated) land
exactly on the relation-class prototype plus isotropic Gaussian noise.
Relation classes follow a Zipf law over the foreground label space; a
configurable share of pairs carries no relation at all and draws from a
dedicated background prototype instead.

Semantic ambiguity is modelled with *sibling groups*: selected tail-class
prototypes are planted close to a head-class prototype, which produces the
soft, unsharpened confidences that defeat a single global acceptance
threshold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .labels import (
    BG_INDEX,
    Dataset,
    Entity,
    PredicateCatalog,
    Scene,
    annotated_counts,
    make_scene,
    relabel_scene,
)


@dataclass(frozen=True)
class GeneratorConfig:
    n_scenes: int = 2000
    entities_min: int = 12
    entities_max: int = 20
    n_fg_classes: int = 10
    zipf_exponent: float = 1.5
    feature_dim: int = 16  # pair feature dimension; entities carry half each
    class_separation: float = 4.0
    noise_sigma: float = 0.7
    bg_noise_sigma: float = 2.0
    annotated_fraction: float = 0.045
    true_bg_fraction: float = 0.15
    sibling_groups: int = 2
    sibling_scale: float = 0.35
    sibling_pairs: str = ""  # explicit "anchor:partner" rank pairs, overrides sibling_groups
    n_entity_classes: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.n_scenes < 1:
            raise ConfigError("n_scenes must be positive")
        if self.n_fg_classes < 2:
            raise ConfigError("need at least 2 foreground classes")
        if self.feature_dim < 2 or self.feature_dim % 2 != 0:
            raise ConfigError("feature_dim must be an even integer >= 2")
        if self.entities_min < 2 or self.entities_max < self.entities_min:
            raise ConfigError("entities_per_scene range must satisfy 2 <= min <= max")
        if self.zipf_exponent < 0.0:
            raise ConfigError("zipf_exponent must be non-negative")
        if not 0.0 < self.annotated_fraction <= 1.0:
            raise ConfigError("annotated_fraction must lie in (0, 1]")
        if not 0.0 <= self.true_bg_fraction < 1.0:
            raise ConfigError("true_bg_fraction must lie in [0, 1)")
        if self.noise_sigma < 0.0 or self.class_separation < 0.0:
            raise ConfigError("noise_sigma and class_separation must be non-negative")
        if self.bg_noise_sigma < 0.0:
            raise ConfigError("bg_noise_sigma must be non-negative")
        if self.sibling_groups < 0 or self.sibling_groups > (self.n_fg_classes - 1) // 2:
            raise ConfigError("sibling_groups must fit disjoint head/tail pairs")
        if self.sibling_scale < 0.0:
            raise ConfigError("sibling_scale must be non-negative")
        self.parsed_sibling_pairs()

    def parsed_sibling_pairs(self) -> list[tuple[int, int]]:
        """Sibling (anchor, partner) class ranks.

        ``sibling_pairs`` like "1:5,2:4" wins over the default pairing of the
        g-th head with the g-th-from-last class; every class may appear once.
        """
        if self.sibling_pairs:
            pairs = []
            for chunk in self.sibling_pairs.replace(" ", "").split(","):
                if not chunk:
                    continue
                try:
                    anchor, partner = (int(x) for x in chunk.split(":"))
                except ValueError as exc:
                    raise ConfigError(f"bad sibling pair {chunk!r}") from exc
                pairs.append((anchor, partner))
        else:
            pairs = [
                (g + 1, self.n_fg_classes - g) for g in range(self.sibling_groups)
            ]
        seen: set[int] = set()
        for anchor, partner in pairs:
            for rank in (anchor, partner):
                if not 1 <= rank <= self.n_fg_classes:
                    raise ConfigError(f"sibling rank {rank} outside 1..{self.n_fg_classes}")
                if rank in seen:
                    raise ConfigError(f"class rank {rank} used in more than one sibling pair")
                seen.add(rank)
        return pairs

    def echo(self) -> dict:
        return asdict(self)


def zipf_shares(n_classes: int, exponent: float) -> np.ndarray:
    """Normalized 1/rank**exponent shares for ranks 1..n_classes."""
    ranks = np.arange(1, n_classes + 1, dtype=np.float64)
    weights = ranks ** (-float(exponent))
    return weights / weights.sum()


def _prototypes(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Class-mean pair features: row 0 background, row c foreground class c.

    Foreground prototypes sit on random orthonormal-ish directions scaled so
    that orthogonal pairs are ``class_separation`` apart; each sibling group
    then moves one tail prototype next to its head anchor at
    ``sibling_scale * class_separation``.  The background prototype is the
    origin: "no relation" has no direction, and with a wide ``bg_noise_sigma``
    its cloud grazes every class region, producing the soft foreground
    argmaxes that real unannotated pairs exhibit.
    """
    n = config.n_fg_classes + 1
    if config.feature_dim >= n:
        raw = rng.standard_normal((config.feature_dim, n))
        q, _ = np.linalg.qr(raw)
        directions = q[:, :n].T
    else:
        raw = rng.standard_normal((n, config.feature_dim))
        directions = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    protos = directions * (config.class_separation / math.sqrt(2.0))
    protos[0] = 0.0
    for anchor, partner in config.parsed_sibling_pairs():
        direction = rng.standard_normal(config.feature_dim)
        direction /= np.linalg.norm(direction)
        protos[partner] = (
            protos[anchor] + config.sibling_scale * config.class_separation * direction
        )
    return protos


def _canonical_relabel(
    scene_groups: Sequence[Sequence[Scene]],
    counts: Sequence[int],
    names: Sequence[str],
) -> tuple[list[list[Scene]], PredicateCatalog]:
    """Re-sort foreground classes by descending count and remap all labels.

    Keeps label index == frequency rank after any operation that changes the
    counts; ties preserve the previous index order.
    """
    order = sorted(range(len(counts)), key=lambda i: (-counts[i], i))
    mapping = {BG_INDEX: BG_INDEX}
    for new_rank, old_zero_based in enumerate(order):
        mapping[old_zero_based + 1] = new_rank + 1
    remapped = [[relabel_scene(s, mapping) for s in scenes] for scenes in scene_groups]
    catalog = PredicateCatalog(
        class_names=("bg",) + tuple(names[i] for i in order),
        counts=tuple(counts[i] for i in order),
    )
    return remapped, catalog


def generate(config: GeneratorConfig) -> Dataset:
    """Generate a fully annotated dataset (observed == hidden everywhere).

    Identical configs produce bit-identical datasets.
    """
    config.validate()
    root = np.random.SeedSequence(config.seed)
    proto_seq, scene_root = root.spawn(2)
    protos = _prototypes(config, np.random.default_rng(proto_seq))
    shares = zipf_shares(config.n_fg_classes, config.zipf_exponent)
    half = config.feature_dim // 2
    lo = max(1, config.entities_min // 2)
    hi = max(lo, config.entities_max // 2)

    scenes = []
    for scene_id, seq in enumerate(scene_root.spawn(config.n_scenes)):
        rng = np.random.default_rng(seq)
        n_pairs = int(rng.integers(lo, hi + 1))
        entities: list[Entity] = []
        pairs = []
        for j in range(n_pairs):
            if rng.random() < config.true_bg_fraction:
                label = BG_INDEX
                sigma = config.bg_noise_sigma
            else:
                label = 1 + int(rng.choice(config.n_fg_classes, p=shares))
                sigma = config.noise_sigma
            proto = protos[label]
            subj_feat = proto[:half] + sigma * rng.standard_normal(half)
            obj_feat = proto[half:] + sigma * rng.standard_normal(half)
            sid, oid = 2 * j, 2 * j + 1
            entities.append(
                Entity(sid, int(rng.integers(config.n_entity_classes)), subj_feat)
            )
            entities.append(
                Entity(oid, int(rng.integers(config.n_entity_classes)), obj_feat)
            )
            pairs.append((sid, oid, label, label))
        scenes.append(make_scene(scene_id, entities, pairs))

    provisional_names = [f"rel{k:02d}" for k in range(1, config.n_fg_classes + 1)]
    counts = annotated_counts(scenes, config.n_fg_classes)
    (scenes,), catalog = _canonical_relabel([scenes], counts, provisional_names)
    return Dataset(scenes=tuple(scenes), catalog=catalog, split="full")


def mask_annotations(dataset: Dataset, annotated_fraction: float, seed: int) -> Dataset:
    """Hide all but ``ceil(fraction * n)`` of the relation-bearing annotations.

    The kept set is a uniform random sample over relation-bearing pairs; all
    other pairs get the background observation.  Hidden labels are untouched
    and pairs with no true relation always observe background.
    """
    if not 0.0 < annotated_fraction <= 1.0:
        raise ConfigError("annotated_fraction must lie in (0, 1]")
    refs = [
        (i, j)
        for i, scene in enumerate(dataset.scenes)
        for j, t in enumerate(scene.triplets)
        if t.hidden_label != BG_INDEX
    ]
    keep = math.ceil(annotated_fraction * len(refs))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chosen = rng.choice(len(refs), size=keep, replace=False) if refs else []
    keep_set = {refs[int(k)] for k in chosen}

    new_scenes = []
    for i, scene in enumerate(dataset.scenes):
        triplets = tuple(
            replace(
                t,
                observed_label=t.hidden_label if (i, j) in keep_set else BG_INDEX,
            )
            for j, t in enumerate(scene.triplets)
        )
        new_scenes.append(Scene(scene.scene_id, scene.entities, triplets))
    return Dataset(scenes=tuple(new_scenes), catalog=dataset.catalog, split=dataset.split)


def _allocate(n: int, fractions: np.ndarray) -> list[int]:
    base = [int(math.floor(f * n)) for f in fractions]
    remainder = n - sum(base)
    residuals = sorted(
        range(len(fractions)), key=lambda i: (-(fractions[i] * n - base[i]), i)
    )
    for i in residuals[:remainder]:
        base[i] += 1
    return base


def split(
    dataset: Dataset,
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Scene-disjoint train/val/test partition.

    Catalog counts are recomputed from the train split's annotated triplets
    only, and labels across all three splits are remapped so that label index
    keeps matching frequency rank under the new counts.
    """
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f <= 0.0):
        raise ConfigError("need three positive split fractions")
    if abs(float(f.sum()) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    n = len(dataset.scenes)
    sizes = _allocate(n, f)
    if any(s == 0 for s in sizes):
        raise ConfigError(f"every split must be non-empty, got sizes {sizes}")

    perm = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    bounds = [0, sizes[0], sizes[0] + sizes[1], n]
    groups = [
        [dataset.scenes[int(i)] for i in perm[bounds[k] : bounds[k + 1]]]
        for k in range(3)
    ]

    fg_names = dataset.catalog.class_names[1:]
    counts = annotated_counts(groups[0], dataset.catalog.n_foreground)
    groups, catalog = _canonical_relabel(groups, counts, fg_names)
    tags = ("train", "val", "test")
    return tuple(
        Dataset(scenes=tuple(g), catalog=catalog, split=tag)
        for g, tag in zip(groups, tags)
    )
