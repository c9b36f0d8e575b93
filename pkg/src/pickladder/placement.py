"""Object placement for the randomization ladder and the pairing hold-out.

Jitter regimes put each object in an axis-aligned box around one of five
canonical region centers.  ``FULL_RANDOM`` draws every object anywhere on the
table and rejects whole samples that collide.  Compositional sampling
assigns objects to regions as a permutation restricted by a
:class:`PairingSplit`.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .config import EnvConfig

JITTER_ATTEMPTS = 1000
FULL_RANDOM_ATTEMPTS = 10_000
MATCHING_ATTEMPTS = 1000
N_REGIONS = 5

REGION_CENTERS = ((0.0, 0.0), (-0.10, 0.15), (0.10, 0.15), (-0.10, -0.15), (0.10, -0.15))
DEFAULT_REGION_OF = {"rubiks_cube": 0, "apple": 1, "orange": 2, "mug": 3, "large_marker": 4}


class PlacementError(RuntimeError):
    pass


class Regime(enum.Enum):
    SMALL_JITTER = "small"
    MEDIUM_JITTER = "medium"
    LARGE_JITTER = "large"
    FULL_RANDOM = "full"

    @property
    def region_dims(self) -> tuple[float, float] | None:
        """Full width/height of the jitter box in meters."""
        return _REGION_DIMS[self]

    @property
    def is_jitter(self) -> bool:
        return self is not Regime.FULL_RANDOM

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str | "Regime") -> "Regime":
        if isinstance(text, Regime):
            return text
        def norm(t: str) -> str:
            return "".join(c for c in t.lower() if c.isalnum())

        key = norm(text)
        for r in cls:
            if key in (norm(r.value), norm(r.name), norm(r.label)):
                return r
        raise ValueError(f"unknown regime {text!r}")


_REGION_DIMS = {
    Regime.SMALL_JITTER: (0.04, 0.06),
    Regime.MEDIUM_JITTER: (0.08, 0.12),
    Regime.LARGE_JITTER: (0.12, 0.16),
    Regime.FULL_RANDOM: None,
}
_LABELS = {
    Regime.SMALL_JITTER: "Small jitter",
    Regime.MEDIUM_JITTER: "Medium jitter",
    Regime.LARGE_JITTER: "Large jitter",
    Regime.FULL_RANDOM: "Full random",
}
LADDER = (Regime.SMALL_JITTER, Regime.MEDIUM_JITTER, Regime.LARGE_JITTER, Regime.FULL_RANDOM)


class Phase(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class Region:
    region_id: int
    center: tuple[float, float]
    half_extents: tuple[float, float]

    def contains(self, xy: Sequence[float], tol: float = 1e-12) -> bool:
        return (
            abs(xy[0] - self.center[0]) <= self.half_extents[0] + tol
            and abs(xy[1] - self.center[1]) <= self.half_extents[1] + tol
        )


@dataclass(frozen=True, eq=False)
class PlacementSample:
    positions: np.ndarray  # (n, 2)
    regime: Regime
    region_assignment: tuple[int, ...] | None = None  # object id -> region id
    seed: int | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PlacementSample):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and self.regime is other.regime
            and self.region_assignment == other.region_assignment
            and self.seed == other.seed
        )


@dataclass(frozen=True)
class PairingSplit:
    train_regions: tuple[tuple[int, ...], ...]  # per object
    eval_regions: tuple[tuple[int, ...], ...]
    seed: int | None = None

    def allowed(self, phase: Phase) -> tuple[tuple[int, ...], ...]:
        return self.train_regions if phase is Phase.TRAIN else self.eval_regions

    def to_dict(self) -> dict:
        return {
            "train_regions": [list(r) for r in self.train_regions],
            "eval_regions": [list(r) for r in self.eval_regions],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PairingSplit":
        return cls(
            tuple(tuple(r) for r in d["train_regions"]),
            tuple(tuple(r) for r in d["eval_regions"]),
            d.get("seed"),
        )


def _rng(rng: np.random.Generator | int | None) -> tuple[np.random.Generator, int | None]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), rng


def canonical_layout(regime: Regime = Regime.SMALL_JITTER) -> list[Region]:
    dims = regime.region_dims or (0.0, 0.0)
    half = (dims[0] / 2, dims[1] / 2)
    return [Region(i, c, half) for i, c in enumerate(REGION_CENTERS)]


def default_assignment(config: EnvConfig) -> tuple[int, ...]:
    return tuple(DEFAULT_REGION_OF[o.name] for o in config.objects)


def _inside(config: EnvConfig, xy: np.ndarray, radius: float, tol: float = 1e-12) -> bool:
    ws = config.workspace
    return (
        abs(xy[0]) <= ws.x_half_extent - radius + tol
        and abs(xy[1]) <= ws.y_half_extent - radius + tol
    )


def _gap_ok(config: EnvConfig, xy, r, others, other_r) -> bool:
    for p, ro in zip(others, other_r):
        if np.hypot(xy[0] - p[0], xy[1] - p[1]) - (r + ro) < config.collision_margin:
            return False
    return True


def pairwise_gaps(config: EnvConfig, positions: np.ndarray) -> np.ndarray:
    """Center distance minus both radii for every pair i < j."""
    radii = np.array([o.radius for o in config.objects])
    i, j = np.triu_indices(len(positions), k=1)
    d = np.hypot(positions[i, 0] - positions[j, 0], positions[i, 1] - positions[j, 1])
    return d - radii[i] - radii[j]


def validate_sample(config: EnvConfig, sample: PlacementSample) -> None:
    pos = np.asarray(sample.positions, dtype=float)
    n = len(config.objects)
    if pos.shape != (n, 2):
        raise PlacementError(f"placement has shape {pos.shape}, expected ({n}, 2)")
    if not np.all(np.isfinite(pos)):
        raise PlacementError("placement contains non-finite coordinates")
    for spec, xy in zip(config.objects, pos):
        if not _inside(config, xy, spec.radius):
            raise PlacementError(f"{spec.name} at {tuple(xy)} leaves the workspace")
    gaps = pairwise_gaps(config, pos)
    if gaps.size and gaps.min() < config.collision_margin - 1e-12:
        raise PlacementError(f"objects collide (min gap {gaps.min():.4f} m)")


def sample_jitter(
    config: EnvConfig,
    regime: Regime,
    assignment: Sequence[int] | None = None,
    rng: np.random.Generator | int | None = None,
) -> PlacementSample:
    """Uniform draw inside each object's region box.

    Under ``SMALL_JITTER`` the object assigned to the center region sits
    exactly at the origin.  Colliding or out-of-table draws are re-drawn per
    object.
    """
    if not regime.is_jitter:
        raise ValueError(f"{regime} is not a jitter regime")
    gen, seed = _rng(rng)
    if assignment is None:
        assignment = default_assignment(config)
    assignment = tuple(int(a) for a in assignment)
    if len(assignment) != len(config.objects):
        raise ValueError("assignment must give one region per object")
    regions = canonical_layout(regime)
    radii = [o.radius for o in config.objects]

    fixed = [i for i, a in enumerate(assignment) if regime is Regime.SMALL_JITTER and a == 0]
    order = fixed + [i for i in range(len(assignment)) if i not in fixed]
    positions = np.zeros((len(assignment), 2))
    placed: list[int] = []
    for i in order:
        region = regions[assignment[i]]
        for _ in range(JITTER_ATTEMPTS):
            if i in fixed:
                xy = np.array(region.center, dtype=float)
            else:
                xy = np.array(
                    [
                        gen.uniform(region.center[0] - region.half_extents[0], region.center[0] + region.half_extents[0]),
                        gen.uniform(region.center[1] - region.half_extents[1], region.center[1] + region.half_extents[1]),
                    ]
                )
            if _inside(config, xy, radii[i]) and _gap_ok(
                config, xy, radii[i], positions[placed], [radii[k] for k in placed]
            ):
                break
        else:
            raise PlacementError(
                f"could not place {config.objects[i].name} in region {region.region_id} "
                f"after {JITTER_ATTEMPTS} attempts (seed={seed})"
            )
        positions[i] = xy
        placed.append(i)
    return PlacementSample(positions, regime, assignment, seed)


def sample_full_random(config: EnvConfig, rng: np.random.Generator | int | None = None) -> PlacementSample:
    """Whole-sample rejection over the table, each object shrunk by its radius."""
    gen, seed = _rng(rng)
    ws = config.workspace
    radii = np.array([o.radius for o in config.objects])
    xmax = ws.x_half_extent - radii
    ymax = ws.y_half_extent - radii
    for _ in range(FULL_RANDOM_ATTEMPTS):
        pos = np.stack([gen.uniform(-xmax, xmax), gen.uniform(-ymax, ymax)], axis=1)
        gaps = pairwise_gaps(config, pos)
        if gaps.size == 0 or gaps.min() >= config.collision_margin:
            return PlacementSample(pos, Regime.FULL_RANDOM, None, seed)
    raise PlacementError(f"full-random placement failed after {FULL_RANDOM_ATTEMPTS} attempts (seed={seed})")


def sample_placement(
    config: EnvConfig,
    regime: Regime,
    rng: np.random.Generator | int | None = None,
    assignment: Sequence[int] | None = None,
) -> PlacementSample:
    if regime is Regime.FULL_RANDOM:
        return sample_full_random(config, rng)
    return sample_jitter(config, regime, assignment, rng)


def make_pairing_split(seed: int | None = None, n_objects: int = N_REGIONS) -> PairingSplit:
    """Circulant split: object with index k trains on regions k, k+1, k+2 and
    is held out on k+3, k+4 (mod 5).  A seed shuffles which object gets
    which index; ``None`` keeps the identity."""
    if n_objects != N_REGIONS:
        raise ValueError("pairing splits need exactly five objects")
    index = list(range(n_objects)) if seed is None else np.random.default_rng(seed).permutation(n_objects).tolist()
    train = tuple(tuple((k + s) % N_REGIONS for s in range(3)) for k in index)
    held = tuple(tuple((k + s) % N_REGIONS for s in range(3, 5)) for k in index)
    return PairingSplit(train, held, seed)


def valid_matchings(split: PairingSplit, phase: Phase, target_id: int | None = None) -> list[tuple[int, ...]]:
    """Every object->region permutation admissible for ``phase``.

    Train: each object sits in one of its training regions.  Eval: the
    instructed object sits in one of its held-out regions; the rest are free.
    """
    n = len(split.train_regions)
    out = []
    for perm in itertools.permutations(range(n)):
        if phase is Phase.TRAIN:
            if all(perm[i] in split.train_regions[i] for i in range(n)):
                out.append(perm)
        elif target_id is None or perm[target_id] in split.eval_regions[target_id]:
            out.append(perm)
    return out


def train_region_modes(split: PairingSplit) -> tuple[int, ...]:
    """Most frequent training region per object under the Train-phase sampler
    (exact, by enumeration; ties go to the lower region id)."""
    ms = valid_matchings(split, Phase.TRAIN)
    n = len(split.train_regions)
    counts = np.zeros((n, N_REGIONS), dtype=int)
    for m in ms:
        for i, r in enumerate(m):
            counts[i, r] += 1
    return tuple(int(np.argmax(counts[i])) for i in range(n))


def sample_compositional(
    config: EnvConfig,
    split: PairingSplit,
    phase: Phase,
    regime: Regime = Regime.SMALL_JITTER,
    rng: np.random.Generator | int | None = None,
    target_id: int | None = None,
) -> PlacementSample:
    """Pairing-split placement: a random permutation of objects over regions,
    retried until it satisfies ``phase``, then jittered like
    :func:`sample_jitter`."""
    if len(config.objects) != len(split.train_regions):
        raise ValueError("split and scene disagree on the object count")
    if phase is Phase.EVAL and target_id is None:
        raise ValueError("Eval-phase placement needs the instructed object")
    gen, seed = _rng(rng)
    n = len(config.objects)
    for _ in range(MATCHING_ATTEMPTS):
        perm = tuple(int(r) for r in gen.permutation(N_REGIONS)[:n])
        if phase is Phase.TRAIN:
            ok = all(perm[i] in split.train_regions[i] for i in range(n))
        else:
            ok = perm[target_id] in split.eval_regions[target_id]
        if ok:
            break
    else:
        raise PlacementError(f"no admissible object-region matching found (seed={seed})")
    sample = sample_jitter(config, regime, perm, gen)
    return PlacementSample(sample.positions, regime, perm, seed)
