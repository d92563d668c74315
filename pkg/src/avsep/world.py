"""Procedural floor plans, the 1 m navigability grid, poses and actions,
geodesic distances, the synthetic sound-class library, and episode sampling.

Scenes are axis-aligned rectangles with optional interior walls carrying door
gaps.  Grid nodes sit at integer-meter coordinates; interior walls sit on
half-integer lines so they separate adjacent node rows/columns.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, GenerationError, InputError
from .signal import Waveform, normalize_power

Node = tuple  # (x, y) integer meters
HEADINGS = (0, 90, 180, 270)
ACTIONS = ("MoveForward", "TurnLeft", "TurnRight")
STOP = "Stop"
_DIRS = {0: (1, 0), 90: (0, 1), 180: (-1, 0), 270: (0, -1)}


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Wall:
    """Axis-aligned interior wall on a half-integer line.

    ``orientation`` is "v" (a line x = pos) or "h" (y = pos); ``solid`` lists
    the wall's solid sub-intervals along the other axis, i.e. the span minus
    its door gaps.
    """

    orientation: str
    pos: float
    solid: tuple

    def blocks(self, t: float) -> bool:
        return any(a <= t <= b for a, b in self.solid)


@dataclass(frozen=True)
class Pose:
    node: Node
    heading: int

    def __post_init__(self):
        if self.heading not in HEADINGS:
            raise InputError(f"heading must be one of {HEADINGS}, got {self.heading}")


class Scene:
    """Immutable floor plan with its navigability grid.

    The room occupies [0, width] x [0, height] meters with boundary walls on
    the integer bounds; grid nodes sit at the strictly interior integer
    coordinates, so every node is at least 1 m from the boundary.
    """

    def __init__(self, seed: int, width: int, height: int, walls: tuple):
        self.seed = seed
        self.width = width
        self.height = height
        self.walls = walls
        self.nodes = tuple(
            (x, y) for x in range(1, width) for y in range(1, height)
        )
        self._node_set = set(self.nodes)
        self._adjacency = self._build_adjacency()
        self._dist_cache = {}

    # -- grid -------------------------------------------------------------

    def _edge_blocked(self, a: Node, b: Node) -> bool:
        (ax, ay), (bx, by) = a, b
        if ax != bx:  # horizontal move crosses vertical walls
            pos = (ax + bx) / 2.0
            return any(
                w.orientation == "v" and w.pos == pos and w.blocks(ay)
                for w in self.walls
            )
        pos = (ay + by) / 2.0
        return any(
            w.orientation == "h" and w.pos == pos and w.blocks(ax)
            for w in self.walls
        )

    def _build_adjacency(self) -> dict:
        adj = {}
        for node in self.nodes:
            x, y = node
            neighbors = []
            for dx, dy in _DIRS.values():
                nb = (x + dx, y + dy)
                if nb in self._node_set and not self._edge_blocked(node, nb):
                    neighbors.append(nb)
            adj[node] = tuple(neighbors)
        return adj

    def is_navigable(self, node: Node) -> bool:
        return tuple(node) in self._node_set

    def neighbors(self, node: Node) -> tuple:
        return self._adjacency[tuple(node)]

    def has_edge(self, a: Node, b: Node) -> bool:
        return tuple(b) in self._adjacency[tuple(a)]

    def is_connected(self) -> bool:
        start = self.nodes[0]
        seen = {start}
        queue = deque([start])
        while queue:
            for nb in self._adjacency[queue.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        return len(seen) == len(self.nodes)

    def distance_map(self, source: Node) -> dict:
        """BFS distances (meters) from ``source`` to every node, cached."""
        source = tuple(source)
        if source not in self._dist_cache:
            dist = {source: 0}
            queue = deque([source])
            while queue:
                cur = queue.popleft()
                for nb in self._adjacency[cur]:
                    if nb not in dist:
                        dist[nb] = dist[cur] + 1
                        queue.append(nb)
            self._dist_cache[source] = dist
        return self._dist_cache[source]

    # -- ray casting ------------------------------------------------------

    def boundary_segments(self) -> list:
        w, h = float(self.width), float(self.height)
        return [
            ("v", 0.0, (0.0, h)),
            ("v", w, (0.0, h)),
            ("h", 0.0, (0.0, w)),
            ("h", h, (0.0, w)),
        ]

    def solid_segments(self) -> list:
        """All solid wall pieces as (orientation, pos, (lo, hi)) triples."""
        segments = self.boundary_segments()
        for wall in self.walls:
            for lo, hi in wall.solid:
                segments.append((wall.orientation, wall.pos, (lo, hi)))
        return segments

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "walls": [
                {"orientation": w.orientation, "pos": w.pos, "solid": list(w.solid)}
                for w in self.walls
            ],
        }

    @staticmethod
    def from_json(data: dict) -> "Scene":
        walls = tuple(
            Wall(w["orientation"], w["pos"], tuple(tuple(s) for s in w["solid"]))
            for w in data["walls"]
        )
        return Scene(data["seed"], data["width"], data["height"], walls)


def segment_crossings(scene: Scene, p: tuple, q: tuple) -> int:
    """Number of interior solid wall pieces the open segment p-q crosses."""
    px, py = p
    qx, qy = q
    count = 0
    for wall in scene.walls:
        if wall.orientation == "v":
            a0, a1, b0, b1 = px, qx, py, qy
        else:
            a0, a1, b0, b1 = py, qy, px, qx
        if (a0 - wall.pos) * (a1 - wall.pos) >= 0:
            continue  # both endpoints on one side
        t = (wall.pos - a0) / (a1 - a0)
        crossing = b0 + t * (b1 - b0)
        if wall.blocks(crossing):
            count += 1
    return count


# ---------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class WorldParams:
    size_range: tuple = (8, 12)
    max_interior_walls: int = 2
    door_width: float = 1.1
    min_source_dist: float = 4.0
    far_start_range: tuple = (4.0, 12.0)
    min_far_triples: int = 500

    def __post_init__(self):
        lo, hi = self.size_range
        if not (3 <= lo <= hi <= 16):
            raise ConfigError(f"room sizes must lie in [3, 16], got {self.size_range}")
        if self.door_width < 1.0:
            raise ConfigError("door gaps must be at least 1 m wide")


def _sample_wall(rng: np.random.Generator, width: int, height: int, door_width: float) -> Wall:
    vertical = bool(rng.integers(0, 2))
    span_len = height if vertical else width
    run_len = width if vertical else height
    # half-integer line between two node columns/rows
    pos = float(rng.integers(1, run_len - 1)) + 0.5
    # door gap centered on an interior node coordinate so its edge stays open
    door_at = int(rng.integers(1, span_len))
    half = door_width / 2.0
    gap = (door_at - half, door_at + half)
    solid = []
    if gap[0] > 0.0:
        solid.append((0.0, gap[0]))
    if gap[1] < span_len:
        solid.append((gap[1], float(span_len)))
    return Wall("v" if vertical else "h", pos, tuple(solid))


def _count_far_triples(scene: Scene, params: WorldParams, cap: int = 2000) -> int:
    """Lower-bound count of (source, source, start) layouts for far episodes."""
    nodes = scene.nodes
    count = 0
    lo, hi = params.far_start_range
    for i, a in enumerate(nodes):
        dist_a = scene.distance_map(a)
        for b in nodes[i + 1 :]:
            if dist_a.get(b, math.inf) < params.min_source_dist:
                continue
            dist_b = scene.distance_map(b)
            for p in nodes:
                da, db = dist_a.get(p, math.inf), dist_b.get(p, math.inf)
                if lo <= da <= hi and lo <= db <= hi:
                    count += 1
                    if count >= cap:
                        return count
    return count


def generate_scene(seed: int, params: WorldParams = WorldParams()) -> Scene:
    """Deterministic scene from a seed; retries until the grid is connected
    and enough episodes are constructible."""
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        lo, hi = params.size_range
        width = int(rng.integers(lo, hi + 1))
        height = int(rng.integers(lo, hi + 1))
        n_walls = int(rng.integers(0, params.max_interior_walls + 1))
        walls = tuple(
            _sample_wall(rng, width, height, params.door_width) for _ in range(n_walls)
        )
        scene = Scene(seed, width, height, walls)
        if not scene.is_connected():
            continue
        if _count_far_triples(scene, params, cap=params.min_far_triples) < params.min_far_triples:
            continue
        return scene
    raise GenerationError(f"no valid scene after 100 attempts for seed {seed}", seed=seed)


# ---------------------------------------------------------------------------
# actions and distances


def apply_action(scene: Scene, pose: Pose, action: str):
    """Returns (new_pose, collided).  Turns always succeed; a blocked
    MoveForward is a flagged no-op."""
    if action == "TurnLeft":
        return Pose(pose.node, (pose.heading + 90) % 360), False
    if action == "TurnRight":
        return Pose(pose.node, (pose.heading - 90) % 360), False
    if action == "MoveForward":
        dx, dy = _DIRS[pose.heading]
        target = (pose.node[0] + dx, pose.node[1] + dy)
        if scene.is_navigable(target) and scene.has_edge(pose.node, target):
            return Pose(target, pose.heading), False
        return pose, True
    if action == STOP:
        return pose, False
    raise InputError(f"unknown action {action!r}")


def geodesic_distance(scene: Scene, a: Node, b: Node) -> float:
    if not scene.is_navigable(a) or not scene.is_navigable(b):
        raise InputError(f"nodes must be navigable: {a}, {b}")
    return float(scene.distance_map(tuple(a)).get(tuple(b), math.inf))


def render_depth_panorama(
    scene: Scene,
    pose: Pose,
    rays: int = 64,
    fov: float = 90.0,
    max_range: float = 20.0,
) -> np.ndarray:
    """Ray-cast distances across ``fov`` degrees centered on the heading.

    Ray k points at heading - fov/2 + (k + 0.5) * fov / rays, so a 360-degree
    panorama rotates by exactly rays/4 slots per 90-degree turn.
    """
    px, py = float(pose.node[0]), float(pose.node[1])
    offsets = (np.arange(rays) + 0.5) * (fov / rays) - fov / 2.0
    # wrap in degrees (exact for these dyadic values) so a 90-degree turn
    # permutes a full panorama bit-exactly
    angles = np.deg2rad(np.mod(pose.heading + offsets, 360.0))
    out = np.full(rays, max_range)
    segments = scene.solid_segments()
    for i, theta in enumerate(angles):
        dx, dy = math.cos(theta), math.sin(theta)
        best = max_range
        for orientation, pos, (lo, hi) in segments:
            if orientation == "v":
                if abs(dx) < 1e-12:
                    continue
                t = (pos - px) / dx
                hit = py + t * dy
            else:
                if abs(dy) < 1e-12:
                    continue
                t = (pos - py) / dy
                hit = px + t * dx
            if t > 1e-9 and lo <= hit <= hi:
                best = min(best, t)
        out[i] = best
    return out


# ---------------------------------------------------------------------------
# sound classes


@dataclass(frozen=True)
class SoundClass:
    id: int
    name: str
    group: str  # speech | music | background
    fundamental_hz: float
    harmonic_rolloff: float
    am_rate_hz: float
    noise_floor: float


def default_sound_classes() -> tuple:
    """Twelve classes: ten speech-like voices, one music-like, one background.

    Fundamentals are distinct multiples of 4 Hz so every clip is periodic over
    both the 1 s and 0.25 s chunk lengths.
    """
    classes = []
    voice_f0 = (96, 112, 128, 144, 164, 184, 204, 224, 248, 272)
    for i, f0 in enumerate(voice_f0):
        classes.append(
            SoundClass(
                id=i,
                name=f"voice{i}",
                group="speech",
                fundamental_hz=float(f0),
                harmonic_rolloff=1.0,
                am_rate_hz=4.0 + 4.0 * (i % 3),
                noise_floor=0.05,
            )
        )
    classes.append(
        SoundClass(10, "strings", "music", 328.0, 0.5, 0.0, 0.02)
    )
    classes.append(
        SoundClass(11, "machinery", "background", 60.0, 1.5, 16.0, 0.6)
    )
    return tuple(classes)


def synthesize_clip(
    sound_class: SoundClass,
    seed: int,
    duration: float = 1.0,
    sample_rate: int = 16000,
    power: float = 1.2,
) -> Waveform:
    """Deterministic periodic monaural clip, power-normalized."""
    rng = np.random.default_rng([sound_class.id, seed])
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    x = np.zeros(n)
    n_harmonics = max(2, int(6000 // sound_class.fundamental_hz))
    for h in range(1, n_harmonics + 1):
        amp = (h ** -sound_class.harmonic_rolloff) * (0.7 + 0.6 * rng.random())
        phase = rng.uniform(0, 2 * np.pi)
        x += amp * np.sin(2 * np.pi * h * sound_class.fundamental_hz * t + phase)
    if sound_class.am_rate_hz > 0:
        am_phase = rng.uniform(0, 2 * np.pi)
        x *= 1.0 + 0.5 * np.sin(2 * np.pi * sound_class.am_rate_hz * t + am_phase)
    if sound_class.noise_floor > 0:
        x += sound_class.noise_floor * np.ptp(x) * rng.standard_normal(n)
    return normalize_power(Waveform(x, sample_rate), power)


def split_clips(pool: dict, split_seed: int = 0) -> dict:
    """Disjoint 16:1:2 train/val/test partition of clip ids per class."""
    out = {"train": {}, "val": {}, "test": {}}
    for class_id, clip_ids in sorted(pool.items()):
        n = len(clip_ids)
        if n < 19:
            raise ConfigError(
                f"class {class_id}: need at least 19 clips for a 16:1:2 split, got {n}"
            )
        order = list(clip_ids)
        np.random.default_rng([split_seed, class_id]).shuffle(order)
        n_val = max(1, round(n / 19))
        n_test = max(2, round(2 * n / 19))
        out["val"][class_id] = sorted(order[:n_val])
        out["test"][class_id] = sorted(order[n_val : n_val + n_test])
        out["train"][class_id] = sorted(order[n_val + n_test :])
    return out


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class SourceSpec:
    class_id: int
    clip_id: int
    location: Node


@dataclass(frozen=True)
class Episode:
    scene_seed: int
    start: Pose
    sources: tuple  # of SourceSpec
    target_index: int
    variant: str  # near | far
    budget: int
    split: str
    heard: bool

    @property
    def target(self) -> SourceSpec:
        return self.sources[self.target_index]

    def to_json(self) -> dict:
        return {
            "scene_seed": self.scene_seed,
            "start": {"node": list(self.start.node), "heading": self.start.heading},
            "sources": [
                {"class_id": s.class_id, "clip_id": s.clip_id, "location": list(s.location)}
                for s in self.sources
            ],
            "target_index": self.target_index,
            "variant": self.variant,
            "budget": self.budget,
            "split": self.split,
            "heard": self.heard,
        }

    @staticmethod
    def from_json(data: dict) -> "Episode":
        return Episode(
            scene_seed=data["scene_seed"],
            start=Pose(tuple(data["start"]["node"]), data["start"]["heading"]),
            sources=tuple(
                SourceSpec(s["class_id"], s["clip_id"], tuple(s["location"]))
                for s in data["sources"]
            ),
            target_index=data["target_index"],
            variant=data["variant"],
            budget=data["budget"],
            split=data["split"],
            heard=data["heard"],
        )


def save_episodes(path, episodes) -> None:
    with open(path, "w") as fh:
        json.dump([e.to_json() for e in episodes], fh, indent=1)


def load_episodes(path):
    with open(path) as fh:
        return [Episode.from_json(d) for d in json.load(fh)]


@dataclass(frozen=True)
class EpisodeConstraints:
    k: int = 2
    min_source_dist: float = 4.0
    far_start_range: tuple = (4.0, 12.0)
    t_near: int = 20
    t_far: int = 100


def _pick_classes(rng, classes, k):
    targets = [c for c in classes if c.group in ("speech", "music")]
    target = targets[rng.integers(0, len(targets))]
    distractor_pool = [c for c in classes if c.group != target.group]
    if len(distractor_pool) < k - 1:
        raise ConfigError(f"not enough distractor classes for k={k}")
    idx = rng.choice(len(distractor_pool), size=k - 1, replace=False)
    return target, [distractor_pool[i] for i in idx]


def sample_episode(
    scene: Scene,
    variant: str,
    constraints: EpisodeConstraints,
    seed: int,
    classes=None,
    clip_pool=None,
    split: str = "train",
    heard: bool = True,
    max_tries: int = 500,
) -> Episode:
    """Seed-deterministic episode respecting placement and typing constraints."""
    if variant not in ("near", "far"):
        raise InputError(f"variant must be near or far, got {variant!r}")
    classes = classes or default_sound_classes()
    rng = np.random.default_rng([scene.seed, seed, 0 if variant == "near" else 1])
    nodes = scene.nodes
    for _ in range(max_tries):
        picks = rng.choice(len(nodes), size=constraints.k, replace=False)
        locations = [nodes[i] for i in picks]
        maps = [scene.distance_map(loc) for loc in locations]
        ok = all(
            maps[i].get(locations[j], math.inf) >= constraints.min_source_dist
            for i in range(constraints.k)
            for j in range(i + 1, constraints.k)
        )
        if not ok:
            continue
        target_class, distractors = _pick_classes(rng, classes, constraints.k)
        target_index = int(rng.integers(0, constraints.k))
        class_order = distractors[:target_index] + [target_class] + distractors[target_index:]

        if variant == "near":
            start = Pose(locations[target_index], HEADINGS[rng.integers(0, 4)])
            budget = constraints.t_near
        else:
            lo, hi = constraints.far_start_range
            candidates = [
                p for p in nodes
                if all(lo <= m.get(p, math.inf) <= hi for m in maps)
            ]
            if not candidates:
                continue
            start = Pose(
                candidates[rng.integers(0, len(candidates))],
                HEADINGS[rng.integers(0, 4)],
            )
            budget = constraints.t_far

        sources = []
        for cls, loc in zip(class_order, locations):
            if clip_pool is not None:
                ids = clip_pool[split][cls.id]
                clip_id = int(ids[rng.integers(0, len(ids))])
            else:
                clip_id = int(rng.integers(0, 1000))
            sources.append(SourceSpec(cls.id, clip_id, loc))
        return Episode(
            scene_seed=scene.seed,
            start=start,
            sources=tuple(sources),
            target_index=target_index,
            variant=variant,
            budget=budget,
            split=split,
            heard=heard,
        )
    raise GenerationError(
        f"could not sample a {variant} episode in scene {scene.seed} "
        f"after {max_tries} tries",
        seed=seed,
    )
