"""Procedural indoor gridworlds with egocentric observations.

A scene is a bordered grid of free, wall, and object cells generated
deterministically from a seed: rooms carved from solid wall, corridors
connecting them, and category instances placed against room walls.  An
agent occupies a free cell with one of four headings and a pitch in
{-1, 0, +1}; it observes a heading-rotated semantic patch with
line-of-sight occlusion, a fan of depth rays, its pose relative to the
episode start, its previous action, and the goal category.

Line-of-sight rule: a cell at Chebyshev distance n from the agent is
visible iff none of the n-1 evenly spaced sample points on the
center-to-center segment falls strictly inside a wall cell.  Sample
points landing exactly on a cell boundary block nothing.  The rule is
evaluated in exact integer arithmetic so that replays are bit-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from heapq import heappop, heappush

import numpy as np

SCENE_SCHEMA = "cnav-scene-v1"
TRAJECTORY_SCHEMA = "cnav-traj-v1"

# scene grid codes
FREE, WALL, OBJECT = 0, 1, 2

# patch codes
P_UNKNOWN, P_FREE, P_WALL, P_OBJECT_BASE = 0, 1, 2, 3


class NavAction(IntEnum):
    MOVE_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    LOOK_UP = 3
    LOOK_DOWN = 4
    STOP = 5


N_ACTIONS = 6

# heading index -> (drow, dcol); N, E, S, W
HEADING_VECS = ((-1, 0), (0, 1), (1, 0), (0, -1))
# 45-degree direction fan, clockwise from north
DIRS8 = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


class SceneGenerationError(RuntimeError):
    """Scene constraints (room placement, object reachability) unsatisfiable."""


@dataclass(frozen=True)
class Pose:
    row: int
    col: int
    heading: int  # 0..3 = N,E,S,W
    pitch: int = 0  # -1 down, 0 level, +1 up


@dataclass(frozen=True)
class SceneObject:
    category: int
    instance: int
    row: int
    col: int


@dataclass
class SceneConfig:
    width: int = 12
    height: int = 12
    room_count: int = 2
    categories_present: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    max_instances: int = 2

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("scene must be at least 8x8")
        if self.room_count < 1:
            raise ValueError("room_count must be >= 1")


@dataclass
class Scene:
    scene_id: str
    seed: int
    width: int
    height: int
    grid: np.ndarray  # (height, width) int8 of FREE/WALL/OBJECT
    objects: list[SceneObject]
    rooms: list[tuple[int, int, int, int]]  # (r0, c0, h, w)
    categories_present: tuple[int, ...]
    _obj_at: dict = field(default_factory=dict, repr=False, compare=False)
    _vis_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self._obj_at:
            self._obj_at = {(o.row, o.col): o for o in self.objects}

    def is_free(self, row: int, col: int) -> bool:
        return (
            0 <= row < self.height
            and 0 <= col < self.width
            and self.grid[row, col] == FREE
        )

    def free_cells(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.grid == FREE)
        return list(zip(rows.tolist(), cols.tolist()))

    def instances_of(self, category: int) -> list[SceneObject]:
        return [o for o in self.objects if o.category == category]


@dataclass
class Observation:
    patch: np.ndarray  # (V, V) int16 patch codes, agent centered, facing up
    depth: np.ndarray  # (R,) floats in [0, 1]
    pose_delta: np.ndarray  # (7,) drow, dcol (normalized), heading one-hot, pitch
    prev_action: np.ndarray  # (6,) one-hot, zeros at episode start
    goal_onehot: np.ndarray  # (n_categories,)


def observations_equal(a: Observation, b: Observation) -> bool:
    return (
        np.array_equal(a.patch, b.patch)
        and np.array_equal(a.depth, b.depth)
        and np.array_equal(a.pose_delta, b.pose_delta)
        and np.array_equal(a.prev_action, b.prev_action)
        and np.array_equal(a.goal_onehot, b.goal_onehot)
    )


@dataclass
class ObsConfig:
    patch_size: int = 9
    depth_rays: int = 5
    n_categories: int = 6

    def __post_init__(self):
        if self.patch_size % 2 == 0 or self.patch_size < 3:
            raise ValueError("patch_size must be odd and >= 3")
        if self.depth_rays < 1:
            raise ValueError("need at least one depth ray")


@dataclass(frozen=True)
class Episode:
    scene_id: str
    start: Pose
    goal_category: int
    p_star: int  # geodesic cell distance to the success region
    max_steps: int = 100


@dataclass
class Trajectory:
    episode: Episode
    observations: list[Observation]
    actions: list[int]

    def __len__(self) -> int:
        return len(self.actions)

    def steps(self):
        return zip(self.observations, self.actions)


# ---------------------------------------------------------------------------
# Scene generation


def _carve_corridor(grid, a, b, horizontal_first: bool) -> None:
    (r0, c0), (r1, c1) = a, b
    if horizontal_first:
        for c in range(min(c0, c1), max(c0, c1) + 1):
            grid[r0, c] = FREE
        for r in range(min(r0, r1), max(r0, r1) + 1):
            grid[r, c1] = FREE
    else:
        for r in range(min(r0, r1), max(r0, r1) + 1):
            grid[r, c0] = FREE
        for c in range(min(c0, c1), max(c0, c1) + 1):
            grid[r1, c] = FREE


def _flood_free(grid, start) -> set:
    seen = {start}
    stack = [start]
    h, w = grid.shape
    while stack:
        r, c = stack.pop()
        for dr, dc in HEADING_VECS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and grid[nr, nc] == FREE and (nr, nc) not in seen:
                seen.add((nr, nc))
                stack.append((nr, nc))
    return seen


def _all_free_connected(grid) -> bool:
    free = np.argwhere(grid == FREE)
    if len(free) == 0:
        return False
    comp = _flood_free(grid, tuple(free[0]))
    return len(comp) == len(free)


def _has_free_chebyshev_neighbor(grid, row, col) -> bool:
    h, w = grid.shape
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            r, c = row + dr, col + dc
            if 0 <= r < h and 0 <= c < w and grid[r, c] == FREE:
                return True
    return False


def generate_scene(seed: int, config: SceneConfig, scene_id: str | None = None) -> Scene:
    """Deterministically generate a connected scene from a seed.

    Rooms are placed by rejection sampling, connected in sequence by
    L-shaped corridors, and every requested category gets at least one
    instance on a wall-adjacent room cell whose removal keeps the free
    space connected.  Raises SceneGenerationError when a category cannot
    be placed.
    """
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    grid = np.full((h, w), WALL, dtype=np.int8)

    rooms: list[tuple[int, int, int, int]] = []
    for i in range(config.room_count):
        placed = False
        for _ in range(200):
            rh = int(rng.integers(3, min(7, h - 4) + 1))
            rw = int(rng.integers(3, min(7, w - 4) + 1))
            r0 = int(rng.integers(1, h - rh))
            c0 = int(rng.integers(1, w - rw))
            ok = True
            for pr0, pc0, ph, pw in rooms:
                if not (r0 + rh + 1 <= pr0 or pr0 + ph + 1 <= r0
                        or c0 + rw + 1 <= pc0 or pc0 + pw + 1 <= c0):
                    ok = False
                    break
            if ok:
                rooms.append((r0, c0, rh, rw))
                grid[r0 : r0 + rh, c0 : c0 + rw] = FREE
                placed = True
                break
        if not placed and i == 0:
            raise SceneGenerationError(f"could not place any room in {w}x{h}")

    centers = [(r0 + rh // 2, c0 + rw // 2) for r0, c0, rh, rw in rooms]
    for i in range(len(centers) - 1):
        _carve_corridor(grid, centers[i], centers[i + 1], bool(rng.integers(2)))

    objects: list[SceneObject] = []
    for category in config.categories_present:
        n_instances = 1 + int(rng.random() < 0.4 and config.max_instances > 1)
        for instance in range(n_instances):
            candidates = []
            for r0, c0, rh, rw in rooms:
                for r in range(r0, r0 + rh):
                    for c in range(c0, c0 + rw):
                        if grid[r, c] != FREE:
                            continue
                        if any(
                            grid[r + dr, c + dc] == WALL for dr, dc in HEADING_VECS
                        ):
                            candidates.append((r, c))
            rng.shuffle(candidates)
            placed = False
            for r, c in candidates:
                grid[r, c] = OBJECT
                ok = _all_free_connected(grid) and all(
                    _has_free_chebyshev_neighbor(grid, o.row, o.col) for o in objects
                ) and _has_free_chebyshev_neighbor(grid, r, c)
                if ok:
                    objects.append(SceneObject(category, instance, r, c))
                    placed = True
                    break
                grid[r, c] = FREE
            if not placed:
                if instance == 0:
                    raise SceneGenerationError(
                        f"no wall-adjacent cell available for category {category}"
                    )
                break  # optional extra instance; fine to skip

    scene = Scene(
        scene_id=scene_id or f"scene-{seed}",
        seed=seed,
        width=w,
        height=h,
        grid=grid,
        objects=objects,
        rooms=rooms,
        categories_present=tuple(config.categories_present),
    )
    return scene


# ---------------------------------------------------------------------------
# Observations


def los_visible(grid: np.ndarray, a: tuple[int, int], b: tuple[int, int]) -> bool:
    """Exact-integer midpoint-sampling visibility between cell centers."""
    ar, ac = a
    br, bc = b
    dr, dc = br - ar, bc - ac
    n = max(abs(dr), abs(dc))
    if n <= 1:
        return True
    for i in range(1, n):
        # sample coordinates scaled by 2n: X/(2n), Y/(2n) in cell units
        x = 2 * n * ar + 2 * i * dr
        y = 2 * n * ac + 2 * i * dc
        if x % (2 * n) == n or y % (2 * n) == n:
            continue  # exactly on a cell boundary: blocks nothing
        r = (x + n) // (2 * n)
        c = (y + n) // (2 * n)
        if (r, c) != (br, bc) and grid[r, c] == WALL:
            return False
    return True


def _world_patch(scene: Scene, row: int, col: int, v: int) -> np.ndarray:
    """World-frame patch around (row, col) with visibility applied (cached)."""
    key = (row, col, v)
    cached = scene._vis_cache.get(key)
    if cached is not None:
        return cached
    radius = v // 2
    patch = np.full((v, v), P_UNKNOWN, dtype=np.int16)
    for i in range(v):
        for j in range(v):
            r, c = row - radius + i, col - radius + j
            if not (0 <= r < scene.height and 0 <= c < scene.width):
                continue
            if not los_visible(scene.grid, (row, col), (r, c)):
                continue
            code = scene.grid[r, c]
            if code == WALL:
                patch[i, j] = P_WALL
            elif code == FREE:
                patch[i, j] = P_FREE
            else:
                patch[i, j] = P_OBJECT_BASE + scene._obj_at[(r, c)].category
    patch.setflags(write=False)
    scene._vis_cache[key] = patch
    return patch


def _pitch_mask(v: int, pitch: int) -> np.ndarray | None:
    """Visibility band for a pitch level: near ring, everything, or far ring."""
    if pitch == 0:
        return None
    radius = v // 2
    cut = max(1, v // 4)
    center = radius
    rr, cc = np.mgrid[0:v, 0:v]
    cheb = np.maximum(np.abs(rr - center), np.abs(cc - center))
    return cheb <= cut if pitch < 0 else cheb >= cut


def depth_rays(scene: Scene, pose: Pose, n_rays: int) -> np.ndarray:
    """Normalized distances to the nearest blocking cell along a forward fan.

    Rays spread over [-90, +90] degrees relative to the heading, left to
    right.  Walls and objects both block; the bordered grid guarantees
    termination.  Distances are cell counts divided by max(width, height).
    """
    out = np.empty(n_rays)
    max_range = max(scene.width, scene.height)
    if n_rays == 1:
        offsets = [0]
    else:
        offsets = [round(-2 + 4 * i / (n_rays - 1)) for i in range(n_rays)]
    for idx, off in enumerate(offsets):
        dr, dc = DIRS8[(2 * pose.heading + off) % 8]
        r, c = pose.row, pose.col
        dist = 0
        while True:
            r += dr
            c += dc
            dist += 1
            if not (0 <= r < scene.height and 0 <= c < scene.width):
                break
            if scene.grid[r, c] != FREE:
                break
        out[idx] = min(dist / max_range, 1.0)
    return out


def observe(
    scene: Scene,
    pose: Pose,
    prev_action: int | None,
    goal_category: int,
    cfg: ObsConfig,
    origin: Pose | None = None,
) -> Observation:
    """Egocentric observation: deterministic in all arguments.

    The patch is rotated so the agent faces up; pitch applies the
    near/full/far visibility band.  ``origin`` anchors the pose delta
    (defaults to the pose itself, i.e. zero displacement).
    """
    if not scene.is_free(pose.row, pose.col):
        raise ValueError(f"pose {pose} is not on a free cell")
    v = cfg.patch_size
    patch = np.rot90(_world_patch(scene, pose.row, pose.col, v), k=pose.heading).copy()
    mask = _pitch_mask(v, pose.pitch)
    if mask is not None:
        patch[~mask] = P_UNKNOWN

    origin = origin or pose
    norm = max(scene.width, scene.height)
    heading_onehot = np.zeros(4)
    heading_onehot[pose.heading] = 1.0
    pose_delta = np.concatenate(
        (
            [(pose.row - origin.row) / norm, (pose.col - origin.col) / norm],
            heading_onehot,
            [float(pose.pitch)],
        )
    )
    prev = np.zeros(N_ACTIONS)
    if prev_action is not None:
        prev[int(prev_action)] = 1.0
    goal = np.zeros(cfg.n_categories)
    goal[goal_category] = 1.0
    return Observation(
        patch=patch,
        depth=depth_rays(scene, pose, cfg.depth_rays),
        pose_delta=pose_delta,
        prev_action=prev,
        goal_onehot=goal,
    )


def step(scene: Scene, pose: Pose, action: int) -> Pose:
    """Apply one action: blocked forward moves leave the pose unchanged."""
    action = NavAction(action)
    if action == NavAction.MOVE_FORWARD:
        dr, dc = HEADING_VECS[pose.heading]
        nr, nc = pose.row + dr, pose.col + dc
        if scene.is_free(nr, nc):
            return Pose(nr, nc, pose.heading, pose.pitch)
        return pose
    if action == NavAction.TURN_LEFT:
        return Pose(pose.row, pose.col, (pose.heading - 1) % 4, pose.pitch)
    if action == NavAction.TURN_RIGHT:
        return Pose(pose.row, pose.col, (pose.heading + 1) % 4, pose.pitch)
    if action == NavAction.LOOK_UP:
        return Pose(pose.row, pose.col, pose.heading, min(pose.pitch + 1, 1))
    if action == NavAction.LOOK_DOWN:
        return Pose(pose.row, pose.col, pose.heading, max(pose.pitch - 1, -1))
    return pose  # STOP


# ---------------------------------------------------------------------------
# Goal regions and planning


def success_cells(scene: Scene, category: int) -> set:
    """Free cells within Chebyshev distance 1 of any instance of category."""
    cells = set()
    for obj in scene.instances_of(category):
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = obj.row + dr, obj.col + dc
                if scene.is_free(r, c):
                    cells.add((r, c))
    return cells


def in_success_region(scene: Scene, cell: tuple[int, int], category: int) -> bool:
    for obj in scene.instances_of(category):
        if max(abs(obj.row - cell[0]), abs(obj.col - cell[1])) <= 1:
            return True
    return False


def shortest_path_length(scene: Scene, start: tuple[int, int], category: int) -> int:
    """BFS cell distance from start to the category's success region."""
    targets = success_cells(scene, category)
    if not targets:
        raise ValueError(f"category {category} has no reachable success region")
    if start in targets:
        return 0
    from collections import deque

    dist = {start: 0}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for dr, dc in HEADING_VECS:
            nxt = (cell[0] + dr, cell[1] + dc)
            if nxt in dist or not scene.is_free(*nxt):
                continue
            dist[nxt] = dist[cell] + 1
            if nxt in targets:
                return dist[nxt]
            queue.append(nxt)
    raise ValueError(f"success region of category {category} unreachable from {start}")


def _turn_actions(src_heading: int, dst_heading: int) -> list[int]:
    delta = (dst_heading - src_heading) % 4
    if delta == 0:
        return []
    if delta == 1:
        return [NavAction.TURN_RIGHT]
    if delta == 3:
        return [NavAction.TURN_LEFT]
    return [NavAction.TURN_RIGHT, NavAction.TURN_RIGHT]


def plan_expert(scene: Scene, episode: Episode, cfg: ObsConfig) -> Trajectory:
    """Shortest demonstration: minimal moves, then minimal turns.

    Dijkstra over (row, col, heading) with lexicographic (moves, turns)
    cost finds a cell path that is BFS-shortest and turn-minimal among
    shortest paths; the action sequence ends with STOP inside the goal's
    success region.
    """
    targets = success_cells(scene, episode.goal_category)
    if not targets:
        raise ValueError(f"goal category {episode.goal_category} absent from scene")
    start_state = (episode.start.row, episode.start.col, episode.start.heading)
    best: dict[tuple, tuple] = {start_state: (0, 0)}
    prev: dict[tuple, tuple] = {}
    heap = [(0, 0, start_state)]
    goal_state = None
    while heap:
        moves, turns, state = heappop(heap)
        if best.get(state, (1 << 30, 0)) < (moves, turns):
            continue
        r, c, hd = state
        if (r, c) in targets:
            goal_state = state
            break
        candidates = []
        dr, dc = HEADING_VECS[hd]
        if scene.is_free(r + dr, c + dc):
            candidates.append(((r + dr, c + dc, hd), (moves + 1, turns), NavAction.MOVE_FORWARD))
        candidates.append(((r, c, (hd - 1) % 4), (moves, turns + 1), NavAction.TURN_LEFT))
        candidates.append(((r, c, (hd + 1) % 4), (moves, turns + 1), NavAction.TURN_RIGHT))
        for nxt, cost, action in candidates:
            if cost < best.get(nxt, (1 << 30, 0)):
                best[nxt] = cost
                prev[nxt] = (state, action)
                heappush(heap, (cost[0], cost[1], nxt))
    if goal_state is None:
        raise ValueError("goal unreachable (generator should prevent this)")

    actions: list[int] = []
    state = goal_state
    while state != start_state:
        state, action = prev[state]
        actions.append(int(action))
    actions.reverse()
    actions.append(int(NavAction.STOP))
    if len(actions) > episode.max_steps:
        raise ValueError(
            f"expert trajectory length {len(actions)} exceeds max_steps {episode.max_steps}"
        )
    return replay_actions(scene, episode, actions, cfg)


def replay_actions(scene: Scene, episode: Episode, actions: list[int], cfg: ObsConfig) -> Trajectory:
    """Regenerate the observation sequence for a stored action sequence."""
    pose = episode.start
    prev_action: int | None = None
    observations = []
    for action in actions:
        observations.append(
            observe(scene, pose, prev_action, episode.goal_category, cfg, episode.start)
        )
        pose = step(scene, pose, action)
        prev_action = int(action)
    return Trajectory(episode=episode, observations=observations, actions=list(actions))


# ---------------------------------------------------------------------------
# Rollout


@dataclass
class RolloutResult:
    observations: list[Observation]
    actions: list[int]
    success: bool
    path_len: int
    final_pose: Pose


def rollout(scene: Scene, episode: Episode, policy, cfg: ObsConfig) -> RolloutResult:
    """Execute a policy for up to max_steps; success needs an explicit STOP.

    ``policy`` exposes ``reset()`` and ``act(observation) -> int``.
    ``path_len`` counts forward moves that changed the agent's cell.
    """
    policy.reset()
    pose = episode.start
    prev_action: int | None = None
    observations: list[Observation] = []
    actions: list[int] = []
    path_len = 0
    success = False
    for _ in range(episode.max_steps):
        obs = observe(scene, pose, prev_action, episode.goal_category, cfg, episode.start)
        action = int(policy.act(obs))
        observations.append(obs)
        actions.append(action)
        if action == NavAction.STOP:
            success = in_success_region(scene, (pose.row, pose.col), episode.goal_category)
            break
        new_pose = step(scene, pose, action)
        if action == NavAction.MOVE_FORWARD and (new_pose.row, new_pose.col) != (pose.row, pose.col):
            path_len += 1
        pose = new_pose
        prev_action = action
    return RolloutResult(observations, actions, success, path_len, pose)


class ExpertPolicy:
    """Replays a planned expert action sequence (resets between episodes)."""

    def __init__(self, scene: Scene, episode: Episode, cfg: ObsConfig):
        self._actions = plan_expert(scene, episode, cfg).actions
        self._t = 0

    def reset(self):
        self._t = 0

    def act(self, obs: Observation) -> int:
        action = self._actions[min(self._t, len(self._actions) - 1)]
        self._t += 1
        return action


# ---------------------------------------------------------------------------
# Serialization (JSONL)


def scene_to_json(scene: Scene) -> str:
    rows = []
    for r in range(scene.height):
        rows.append("".join("#" if scene.grid[r, c] else "." for c in range(scene.width)))
    # object cells are stored separately and re-marked on load
    for obj in scene.objects:
        row = rows[obj.row]
        rows[obj.row] = row[: obj.col] + "." + row[obj.col + 1 :]
    doc = {
        "schema": SCENE_SCHEMA,
        "id": scene.scene_id,
        "seed": scene.seed,
        "width": scene.width,
        "height": scene.height,
        "rows": rows,
        "objects": [[o.category, o.instance, o.row, o.col] for o in scene.objects],
        "rooms": [list(r) for r in scene.rooms],
        "categories_present": list(scene.categories_present),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def scene_from_json(line: str) -> Scene:
    doc = json.loads(line)
    if doc.get("schema") != SCENE_SCHEMA:
        raise ValueError(f"unexpected scene schema: {doc.get('schema')!r}")
    grid = np.zeros((doc["height"], doc["width"]), dtype=np.int8)
    for r, row in enumerate(doc["rows"]):
        for c, ch in enumerate(row):
            grid[r, c] = WALL if ch == "#" else FREE
    objects = [SceneObject(*entry) for entry in doc["objects"]]
    for obj in objects:
        grid[obj.row, obj.col] = OBJECT
    return Scene(
        scene_id=doc["id"],
        seed=doc["seed"],
        width=doc["width"],
        height=doc["height"],
        grid=grid,
        objects=objects,
        rooms=[tuple(r) for r in doc["rooms"]],
        categories_present=tuple(doc["categories_present"]),
    )


def trajectory_to_json(traj: Trajectory) -> str:
    ep = traj.episode
    doc = {
        "schema": TRAJECTORY_SCHEMA,
        "episode": {
            "scene_id": ep.scene_id,
            "start": [ep.start.row, ep.start.col, ep.start.heading, ep.start.pitch],
            "goal_category": ep.goal_category,
            "p_star": ep.p_star,
            "max_steps": ep.max_steps,
        },
        "actions": list(map(int, traj.actions)),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def episode_from_doc(doc: dict) -> Episode:
    return Episode(
        scene_id=doc["scene_id"],
        start=Pose(*doc["start"]),
        goal_category=doc["goal_category"],
        p_star=doc["p_star"],
        max_steps=doc["max_steps"],
    )


def trajectory_from_json(line: str, scenes: dict[str, Scene], cfg: ObsConfig) -> Trajectory:
    """Rebuild a trajectory; observations are regenerated by replay."""
    doc = json.loads(line)
    if doc.get("schema") != TRAJECTORY_SCHEMA:
        raise ValueError(f"unexpected trajectory schema: {doc.get('schema')!r}")
    episode = episode_from_doc(doc["episode"])
    scene = scenes[episode.scene_id]
    return replay_actions(scene, episode, doc["actions"], cfg)
