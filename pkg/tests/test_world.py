import json
import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avsep import world as W
from avsep.errors import ConfigError, GenerationError, InputError


def open_room(width=8, height=8):
    return W.Scene(seed=0, width=width, height=height, walls=())


def flood_fill(scene):
    # independent connectivity oracle
    seen = {scene.nodes[0]}
    stack = [scene.nodes[0]]
    while stack:
        node = stack.pop()
        for nb in scene.neighbors(node):
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen


class TestSceneGeneration:
    def test_open_room_fully_connected(self):
        scene = open_room()
        assert len(scene.nodes) == 7 * 7
        assert flood_fill(scene) == set(scene.nodes)
        # every interior adjacency exists when there are no walls
        for x, y in scene.nodes:
            expected = sum(
                1
                for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if (x + dx, y + dy) in set(scene.nodes)
            )
            assert len(scene.neighbors((x, y))) == expected

    def test_same_seed_identical_scene(self):
        a = W.generate_scene(42)
        b = W.generate_scene(42)
        assert a.to_json() == b.to_json()

    def test_thousand_seeds_single_component(self):
        for seed in range(1000):
            scene = W.generate_scene(seed)
            assert flood_fill(scene) == set(scene.nodes), f"seed {seed} disconnected"

    def test_door_gaps_pass_constraint(self):
        for seed in range(100):
            scene = W.generate_scene(seed)
            for wall in scene.walls:
                pieces = sorted(wall.solid)
                for (_, hi), (lo2, _) in zip(pieces, pieces[1:]):
                    assert lo2 - hi >= 1.0

    def test_bad_params_rejected(self):
        with pytest.raises(ConfigError):
            W.WorldParams(size_range=(2, 30))
        with pytest.raises(ConfigError):
            W.WorldParams(door_width=0.5)

    def test_scene_json_roundtrip(self):
        scene = W.generate_scene(7)
        back = W.Scene.from_json(json.loads(json.dumps(scene.to_json())))
        assert back.to_json() == scene.to_json()


class TestActions:
    def test_turn_left_from_zero(self):
        scene = open_room()
        pose, collided = W.apply_action(scene, W.Pose((3, 3), 0), "TurnLeft")
        assert pose.heading == 90 and not collided

    def test_move_into_wall_is_flagged_noop(self):
        scene = open_room()
        pose = W.Pose((7, 3), 0)  # east edge node facing the boundary
        new, collided = W.apply_action(scene, pose, "MoveForward")
        assert new == pose and collided

    def test_four_left_turns_identity(self):
        scene = open_room()
        pose = W.Pose((3, 3), 90)
        p = pose
        for _ in range(4):
            p, _ = W.apply_action(scene, p, "TurnLeft")
        assert p == pose

    @settings(max_examples=200, deadline=None)
    @given(
        start=st.tuples(st.integers(1, 7), st.integers(1, 7)),
        heading=st.sampled_from(W.HEADINGS),
        actions=st.lists(st.sampled_from(W.ACTIONS), max_size=30),
    )
    def test_actions_never_leave_grid(self, start, heading, actions):
        scene = open_room()
        pose = W.Pose(start, heading)
        for action in actions:
            pose, _ = W.apply_action(scene, pose, action)
            assert scene.is_navigable(pose.node)

    @settings(max_examples=100, deadline=None)
    @given(
        start=st.tuples(st.integers(1, 7), st.integers(1, 7)),
        heading=st.sampled_from(W.HEADINGS),
    )
    def test_turn_pair_is_identity(self, start, heading):
        scene = open_room()
        pose = W.Pose(start, heading)
        p, _ = W.apply_action(scene, pose, "TurnLeft")
        p, _ = W.apply_action(scene, p, "TurnRight")
        assert p == pose


class TestGeodesic:
    def test_self_distance_zero(self):
        scene = open_room()
        assert W.geodesic_distance(scene, (3, 3), (3, 3)) == 0.0

    def test_open_corridor(self):
        scene = open_room()
        assert W.geodesic_distance(scene, (1, 1), (6, 1)) == 5.0

    def test_matches_dijkstra_oracle(self):
        for seed in (3, 17, 101):
            scene = W.generate_scene(seed)
            graph = nx.Graph()
            for node in scene.nodes:
                for nb in scene.neighbors(node):
                    graph.add_edge(node, nb, weight=1)
            rng = np.random.default_rng(seed)
            nodes = list(scene.nodes)
            for _ in range(30):
                a = nodes[rng.integers(len(nodes))]
                b = nodes[rng.integers(len(nodes))]
                expected = nx.dijkstra_path_length(graph, a, b)
                assert W.geodesic_distance(scene, a, b) == expected

    def test_symmetry_and_triangle_inequality(self):
        scene = W.generate_scene(5)
        rng = np.random.default_rng(0)
        nodes = list(scene.nodes)
        for _ in range(50):
            a, b, c = (nodes[rng.integers(len(nodes))] for _ in range(3))
            dab = W.geodesic_distance(scene, a, b)
            assert dab == W.geodesic_distance(scene, b, a)
            assert dab <= W.geodesic_distance(scene, a, c) + W.geodesic_distance(scene, c, b)

    def test_non_navigable_rejected(self):
        scene = open_room()
        with pytest.raises(InputError):
            W.geodesic_distance(scene, (0, 0), (3, 3))


class TestDepthPanorama:
    def test_center_ray_hits_facing_wall(self):
        scene = open_room(8, 8)
        # analytic oracle: agent at x=5 facing +x, boundary wall at x=8
        pan = W.render_depth_panorama(scene, W.Pose((5, 4), 0), rays=1, fov=90)
        assert pan[0] == pytest.approx(3.0, abs=1e-12)

    def test_rotation_permutes_full_panorama(self):
        scene = W.generate_scene(11)
        node = scene.nodes[len(scene.nodes) // 2]
        base = W.render_depth_panorama(scene, W.Pose(node, 0), rays=64, fov=360)
        turned = W.render_depth_panorama(scene, W.Pose(node, 90), rays=64, fov=360)
        assert np.array_equal(np.roll(base, -16), turned)

    def test_all_rays_capped(self):
        scene = open_room(8, 8)
        pan = W.render_depth_panorama(scene, W.Pose((4, 4), 0), rays=64, fov=360, max_range=2.5)
        assert np.all(pan <= 2.5)
        assert np.all(pan > 0)


class TestSoundLibrary:
    def test_twelve_distinct_classes(self):
        classes = W.default_sound_classes()
        assert len(classes) == 12
        groups = [c.group for c in classes]
        assert groups.count("speech") == 10
        assert groups.count("music") == 1
        assert groups.count("background") == 1
        f0 = [c.fundamental_hz for c in classes]
        assert len(set(f0)) == 12

    def test_clip_power_normalized(self):
        clip = W.synthesize_clip(W.default_sound_classes()[0], seed=5, duration=1.0)
        assert abs(float(np.mean(clip.samples**2)) - 1.2) <= 1e-9

    def test_clip_deterministic(self):
        cls = W.default_sound_classes()[3]
        a = W.synthesize_clip(cls, seed=9, duration=0.25)
        b = W.synthesize_clip(cls, seed=9, duration=0.25)
        assert np.array_equal(a.samples, b.samples)

    def test_distinct_fundamentals_have_distinct_peaks(self):
        # DFT peak-picking oracle on two voices an octave-ish apart
        classes = W.default_sound_classes()
        a = W.synthesize_clip(classes[0], seed=1, duration=1.0)  # 96 Hz
        b = W.synthesize_clip(classes[9], seed=1, duration=1.0)  # 272 Hz
        spec_a = np.abs(np.fft.rfft(a.samples[0]))
        spec_b = np.abs(np.fft.rfft(b.samples[0]))
        peak_a = np.argmax(spec_a[50:4000]) + 50
        peak_b = np.argmax(spec_b[50:4000]) + 50
        assert peak_a != peak_b
        assert peak_a % 96 < 3 or 96 - (peak_a % 96) < 3


class TestClipSplits:
    def test_nineteen_clips(self):
        pool = {0: list(range(19))}
        split = W.split_clips(pool)
        assert len(split["train"][0]) == 16
        assert len(split["val"][0]) == 1
        assert len(split["test"][0]) == 2

    def test_proportional_scaling(self):
        split = W.split_clips({0: list(range(38))})
        assert (len(split["train"][0]), len(split["val"][0]), len(split["test"][0])) == (32, 2, 4)

    def test_partition_properties(self):
        pool = {0: list(range(25)), 1: list(range(19))}
        split = W.split_clips(pool, split_seed=3)
        for cid, clips in pool.items():
            parts = [set(split[k][cid]) for k in ("train", "val", "test")]
            assert set.union(*parts) == set(clips)
            assert sum(len(p) for p in parts) == len(clips)

    def test_undersized_pool_rejected(self):
        with pytest.raises(ConfigError):
            W.split_clips({0: list(range(10))})


class TestEpisodeSampling:
    def setup_method(self):
        self.scene = W.generate_scene(2)
        self.constraints = W.EpisodeConstraints(k=2, min_source_dist=4.0)

    def test_near_starts_at_target(self):
        for seed in range(50):
            ep = W.sample_episode(self.scene, "near", self.constraints, seed)
            assert ep.start.node == ep.target.location
            assert ep.budget == 20

    def test_far_start_distance_window(self):
        for seed in range(50):
            ep = W.sample_episode(self.scene, "far", self.constraints, seed)
            assert ep.budget == 100
            for src in ep.sources:
                d = W.geodesic_distance(self.scene, ep.start.node, src.location)
                assert 4.0 <= d <= 12.0

    def test_thousand_draws_respect_constraints(self):
        for variant in ("near", "far"):
            for seed in range(500):
                ep = W.sample_episode(self.scene, variant, self.constraints, seed)
                locs = [s.location for s in ep.sources]
                for i in range(len(locs)):
                    for j in range(i + 1, len(locs)):
                        assert W.geodesic_distance(self.scene, locs[i], locs[j]) >= 4.0
                classes = [s.class_id for s in ep.sources]
                assert len(set(classes)) == len(classes)

    def test_target_group_and_distractor_group_differ(self):
        classes = {c.id: c for c in W.default_sound_classes()}
        for seed in range(100):
            ep = W.sample_episode(self.scene, "near", self.constraints, seed)
            target_group = classes[ep.target.class_id].group
            assert target_group in ("speech", "music")
            for i, src in enumerate(ep.sources):
                if i != ep.target_index:
                    assert classes[src.class_id].group != target_group

    def test_deterministic_in_seed(self):
        a = W.sample_episode(self.scene, "far", self.constraints, 13)
        b = W.sample_episode(self.scene, "far", self.constraints, 13)
        assert a == b

    def test_infeasible_constraints_error(self):
        tiny = W.Scene(seed=0, width=4, height=4, walls=())
        hard = W.EpisodeConstraints(k=2, min_source_dist=50.0)
        with pytest.raises(GenerationError):
            W.sample_episode(tiny, "near", hard, seed=0, max_tries=20)

    def test_episode_json_roundtrip(self, tmp_path):
        eps = [W.sample_episode(self.scene, "far", self.constraints, s) for s in range(5)]
        path = tmp_path / "episodes.json"
        W.save_episodes(path, eps)
        assert W.load_episodes(path) == eps
