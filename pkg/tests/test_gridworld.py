import numpy as np
import pytest

from cnav import gridworld as gw
from cnav import oracles


def scene_from_ascii(rows, objects=()):
    """Build a scene from '#'/'.' art plus (category, instance, r, c) objects."""
    h, w = len(rows), len(rows[0])
    grid = np.zeros((h, w), dtype=np.int8)
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            grid[r, c] = gw.WALL if ch == "#" else gw.FREE
    objs = [gw.SceneObject(*o) for o in objects]
    for o in objs:
        grid[o.row, o.col] = gw.OBJECT
    cats = tuple(sorted({o.category for o in objs}))
    return gw.Scene(
        scene_id="ascii",
        seed=0,
        width=w,
        height=h,
        grid=grid,
        objects=objs,
        rooms=[(1, 1, h - 2, w - 2)],
        categories_present=cats,
    )


CFG = gw.ObsConfig(patch_size=9, depth_rays=5, n_categories=6)


# ---------------------------------------------------------------------------
# Scene generation


def test_scene_determinism():
    cfg = gw.SceneConfig(width=12, height=12, room_count=2)
    a = gw.generate_scene(42, cfg)
    b = gw.generate_scene(42, cfg)
    assert gw.scene_to_json(a) == gw.scene_to_json(b)


def test_single_room_single_category_reachable():
    cfg = gw.SceneConfig(width=10, height=10, room_count=1, categories_present=(3,))
    scene = gw.generate_scene(7, cfg)
    instances = scene.instances_of(3)
    assert instances
    assert gw.success_cells(scene, 3)
    start = scene.free_cells()[0]
    assert gw.shortest_path_length(scene, start, 3) >= 0


def _independent_flood(grid):
    free = {(r, c) for r, c in zip(*np.nonzero(grid == gw.FREE))}
    start = next(iter(sorted(free)))
    seen = {start}
    stack = [start]
    while stack:
        r, c = stack.pop()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if (nr, nc) in free and (nr, nc) not in seen:
                seen.add((nr, nc))
                stack.append((nr, nc))
    return seen == free


@pytest.mark.parametrize("base_seed", [0, 50])
def test_hundred_scenes_connected_with_border_walls(base_seed):
    cfg = gw.SceneConfig(width=12, height=12, room_count=2)
    for seed in range(base_seed, base_seed + 50):
        scene = gw.generate_scene(seed, cfg)
        assert _independent_flood(scene.grid), f"seed {seed} disconnected"
        assert (scene.grid[0, :] == gw.WALL).all() and (scene.grid[-1, :] == gw.WALL).all()
        assert (scene.grid[:, 0] == gw.WALL).all() and (scene.grid[:, -1] == gw.WALL).all()
        for cat in cfg.categories_present:
            assert scene.instances_of(cat), f"seed {seed} missing category {cat}"


# ---------------------------------------------------------------------------
# Observations


def test_patch_rotation_between_headings():
    scene = scene_from_ascii(
        [
            "########",
            "#......#",
            "#.##...#",
            "#......#",
            "#...#..#",
            "#......#",
            "#......#",
            "########",
        ]
    )
    pose_n = gw.Pose(4, 3, 0)
    pose_e = gw.Pose(4, 3, 1)
    obs_n = gw.observe(scene, pose_n, None, 0, CFG)
    obs_e = gw.observe(scene, pose_e, None, 0, CFG)
    assert np.array_equal(obs_e.patch, np.rot90(obs_n.patch, k=1))


def test_depth_forward_minimum_when_wall_ahead():
    scene = scene_from_ascii(
        [
            "#####",
            "#...#",
            "#...#",
            "#...#",
            "#####",
        ]
    )
    obs = gw.observe(scene, gw.Pose(1, 2, 0), None, 0, CFG)  # facing the north wall
    forward = obs.depth[CFG.depth_rays // 2]
    assert forward == pytest.approx(1.0 / max(scene.width, scene.height))


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_patch_matches_bruteforce_raycast(seed):
    cfg = gw.SceneConfig(width=12, height=12, room_count=2)
    scene = gw.generate_scene(seed, cfg)
    rng = np.random.default_rng(seed)
    cells = scene.free_cells()
    v = CFG.patch_size
    radius = v // 2
    for _ in range(5):
        r, c = cells[rng.integers(len(cells))]
        heading = int(rng.integers(4))
        obs = gw.observe(scene, gw.Pose(r, c, heading), None, 0, CFG)
        world = np.full((v, v), gw.P_UNKNOWN, dtype=np.int16)
        for i in range(v):
            for j in range(v):
                tr, tc = r - radius + i, c - radius + j
                if not (0 <= tr < scene.height and 0 <= tc < scene.width):
                    continue
                if not oracles.visible_bruteforce(scene.grid, (r, c), (tr, tc)):
                    continue
                code = scene.grid[tr, tc]
                if code == gw.WALL:
                    world[i, j] = gw.P_WALL
                elif code == gw.FREE:
                    world[i, j] = gw.P_FREE
                else:
                    world[i, j] = gw.P_OBJECT_BASE + scene._obj_at[(tr, tc)].category
        assert np.array_equal(obs.patch, np.rot90(world, k=heading))


def test_pitch_masks_near_and_far():
    scene = scene_from_ascii(
        [
            "###########",
            "#.........#",
            "#.........#",
            "#.........#",
            "#.........#",
            "#.........#",
            "#.........#",
            "#.........#",
            "#.........#",
            "#.........#",
            "###########",
        ]
    )
    center = gw.Pose(5, 5, 0)
    level = gw.observe(scene, center, None, 0, CFG).patch
    down = gw.observe(scene, gw.Pose(5, 5, 0, -1), None, 0, CFG).patch
    up = gw.observe(scene, gw.Pose(5, 5, 0, 1), None, 0, CFG).patch
    v = CFG.patch_size
    rr, cc = np.mgrid[0:v, 0:v]
    cheb = np.maximum(np.abs(rr - v // 2), np.abs(cc - v // 2))
    cut = max(1, v // 4)
    assert np.array_equal(down[cheb > cut], np.zeros((cheb > cut).sum(), dtype=np.int16))
    assert np.array_equal(down[cheb <= cut], level[cheb <= cut])
    assert np.array_equal(up[cheb < cut], np.zeros((cheb < cut).sum(), dtype=np.int16))
    assert np.array_equal(up[cheb >= cut], level[cheb >= cut])


# ---------------------------------------------------------------------------
# Step semantics


def test_move_into_wall_is_a_noop():
    scene = scene_from_ascii(["####", "#..#", "####"])
    pose = gw.Pose(1, 1, 0)  # facing the wall to the north
    assert gw.step(scene, pose, gw.NavAction.MOVE_FORWARD) == pose


def test_four_left_turns_identity():
    scene = scene_from_ascii(["####", "#..#", "####"])
    pose = gw.Pose(1, 1, 2)
    for _ in range(4):
        pose = gw.step(scene, pose, gw.NavAction.TURN_LEFT)
    assert pose == gw.Pose(1, 1, 2)


def test_pitch_clamps():
    scene = scene_from_ascii(["####", "#..#", "####"])
    pose = gw.Pose(1, 1, 0, 1)
    assert gw.step(scene, pose, gw.NavAction.LOOK_UP).pitch == 1
    pose = gw.Pose(1, 1, 0, -1)
    assert gw.step(scene, pose, gw.NavAction.LOOK_DOWN).pitch == -1


def test_action_codes_fixed():
    assert [int(a) for a in gw.NavAction] == [0, 1, 2, 3, 4, 5]
    assert gw.NavAction.STOP == 5 and gw.NavAction.MOVE_FORWARD == 0


# ---------------------------------------------------------------------------
# Expert planning


def test_expert_stop_only_when_starting_in_region():
    scene = scene_from_ascii(
        ["######", "#....#", "#....#", "######"], objects=[(0, 0, 1, 4)]
    )
    episode = gw.Episode("ascii", gw.Pose(1, 3, 1), 0, 0, max_steps=20)
    traj = gw.plan_expert(scene, episode, CFG)
    assert traj.actions == [int(gw.NavAction.STOP)]


def test_expert_straight_corridor():
    scene = scene_from_ascii(["#######", "#.....#", "#######"], objects=[(0, 0, 1, 5)])
    episode = gw.Episode("ascii", gw.Pose(1, 1, 1), 0, 3, max_steps=20)
    traj = gw.plan_expert(scene, episode, CFG)
    F, S = int(gw.NavAction.MOVE_FORWARD), int(gw.NavAction.STOP)
    assert traj.actions == [F, F, F, S]


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_expert_forward_count_equals_geodesic(seed):
    cfg = gw.SceneConfig(width=12, height=12, room_count=2)
    scene = gw.generate_scene(seed, cfg)
    rng = np.random.default_rng(seed)
    cells = scene.free_cells()
    for _ in range(10):
        start = cells[rng.integers(len(cells))]
        category = int(rng.integers(6))
        p_star = gw.shortest_path_length(scene, start, category)
        assert p_star == oracles.geodesic_bfs(scene, start, category)
        episode = gw.Episode(
            scene.scene_id, gw.Pose(start[0], start[1], int(rng.integers(4))),
            category, p_star, max_steps=100,
        )
        traj = gw.plan_expert(scene, episode, CFG)
        forward = sum(1 for a in traj.actions if a == gw.NavAction.MOVE_FORWARD)
        assert forward == p_star
        assert traj.actions[-1] == gw.NavAction.STOP


# ---------------------------------------------------------------------------
# Rollout


class StopPolicy:
    def reset(self):
        pass

    def act(self, obs):
        return int(gw.NavAction.STOP)


class RandomPolicy:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def reset(self):
        pass

    def act(self, obs):
        return int(self.rng.integers(6))


def _sample_episodes(scene, n, seed, max_steps=60):
    rng = np.random.default_rng(seed)
    cells = scene.free_cells()
    episodes = []
    while len(episodes) < n:
        start = cells[rng.integers(len(cells))]
        category = int(rng.integers(6))
        if gw.in_success_region(scene, start, category):
            continue
        p_star = gw.shortest_path_length(scene, start, category)
        episodes.append(
            gw.Episode(scene.scene_id, gw.Pose(*start, int(rng.integers(4))),
                       category, p_star, max_steps)
        )
    return episodes


def test_immediate_stop_outside_region_fails():
    scene = gw.generate_scene(3, gw.SceneConfig())
    episode = _sample_episodes(scene, 1, 0)[0]
    result = gw.rollout(scene, episode, StopPolicy(), CFG)
    assert result.success is False and result.path_len == 0


def test_expert_rollout_succeeds_with_geodesic_path():
    scene = gw.generate_scene(4, gw.SceneConfig())
    for episode in _sample_episodes(scene, 5, 1):
        policy = gw.ExpertPolicy(scene, episode, CFG)
        result = gw.rollout(scene, episode, policy, CFG)
        assert result.success is True
        assert result.path_len == episode.p_star


def test_random_policy_below_expert():
    scene = gw.generate_scene(5, gw.SceneConfig())
    episodes = _sample_episodes(scene, 200, 2)
    random_wins = expert_wins = 0
    policy = RandomPolicy(0)
    for episode in episodes:
        random_wins += gw.rollout(scene, episode, policy, CFG).success
        expert_wins += gw.rollout(scene, episode, gw.ExpertPolicy(scene, episode, CFG), CFG).success
    assert expert_wins == len(episodes)
    assert random_wins < expert_wins


# ---------------------------------------------------------------------------
# Replay invariant and serialization


def test_trajectory_replay_reproduces_observations_bitwise():
    scene = gw.generate_scene(6, gw.SceneConfig())
    episode = _sample_episodes(scene, 1, 3)[0]
    traj = gw.plan_expert(scene, episode, CFG)
    replayed = gw.replay_actions(scene, episode, traj.actions, CFG)
    assert len(replayed) == len(traj)
    for a, b in zip(traj.observations, replayed.observations):
        assert gw.observations_equal(a, b)


def test_scene_json_roundtrip():
    scene = gw.generate_scene(8, gw.SceneConfig())
    line = gw.scene_to_json(scene)
    again = gw.scene_from_json(line)
    assert gw.scene_to_json(again) == line
    assert np.array_equal(again.grid, scene.grid)


def test_trajectory_json_roundtrip_regenerates_observations():
    scene = gw.generate_scene(9, gw.SceneConfig())
    episode = _sample_episodes(scene, 1, 4)[0]
    traj = gw.plan_expert(scene, episode, CFG)
    line = gw.trajectory_to_json(traj)
    again = gw.trajectory_from_json(line, {scene.scene_id: scene}, CFG)
    assert again.actions == traj.actions
    assert again.episode == traj.episode
    for a, b in zip(traj.observations, again.observations):
        assert gw.observations_equal(a, b)
