import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from warptrack import DegenerateInputError, InputError, NoConsensusError, ObjectLostError, PointCloud
from warptrack.contacts import ContactEvent
from warptrack.objects import (
    ObjectResult,
    ObjectSegmentationParams,
    RigidPose,
    TrajectorySimilarity,
    load_object_result,
    pick_moving_cluster,
    ransac_rigid,
    rotation_axis,
    rotation_geodesic_deg,
    save_object_result,
    segment_object,
    spectral_cluster_2,
    trajectory_similarity,
    umeyama_rigid_fit,
)
from warptrack.tracking import LabeledTrajectorySet, TrajectorySet


def rot_z(deg):
    g = np.radians(deg)
    return np.array([[np.cos(g), -np.sin(g), 0], [np.sin(g), np.cos(g), 0], [0, 0, 1]])


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def make_traj(position_arrays, labels=None):
    states = tuple(PointCloud(p) for p in position_arrays)
    traj = TrajectorySet(states)
    if labels is None:
        return traj
    return LabeledTrajectorySet(traj, np.asarray(labels, dtype=bool))


class TestTrajectorySimilarity:
    def test_rigid_pair_similarity_is_one(self, rng):
        base = rng.normal(size=(2, 3))
        frames = [base @ random_rotation(rng).T + rng.normal(size=3) for _ in range(5)]
        traj = make_traj(frames)
        sim = trajectory_similarity(traj, np.array([0, 1]), (0, 4), sigma=0.05)
        np.testing.assert_allclose(sim.matrix, 1.0)

    def test_kernel_value_at_one_sigma_gap(self):
        # d ranges from 1.0 to 1.05 with sigma 0.05: s = exp(-1/2)
        frames = [
            np.array([[0.0, 0, 0], [1.0, 0, 0]]),
            np.array([[0.0, 0, 0], [1.05, 0, 0]]),
        ]
        sim = trajectory_similarity(make_traj(frames), np.array([0, 1]), (0, 1), sigma=0.05)
        np.testing.assert_allclose(sim.matrix[0, 1], np.exp(-0.5), atol=1e-12)

    def test_static_pair_similarity_is_one(self):
        frames = [np.array([[0.0, 0, 0], [0.3, 0.1, 0]])] * 4
        sim = trajectory_similarity(make_traj(frames), np.array([0, 1]), (0, 3), sigma=0.01)
        np.testing.assert_allclose(sim.matrix, 1.0)

    def test_window_validation(self):
        traj = make_traj([np.zeros((3, 3))] * 2)
        with pytest.raises(InputError):
            trajectory_similarity(traj, np.array([0, 1]), (0, 5), sigma=0.1)
        with pytest.raises(InputError):
            trajectory_similarity(traj, np.array([0]), (0, 1), sigma=0.1)

    def test_invariants_validated(self):
        with pytest.raises(InputError):
            TrajectorySimilarity(np.array([[1.0, 0.5], [0.4, 1.0]]), sigma=0.1)
        with pytest.raises(InputError):
            TrajectorySimilarity(np.array([[0.9, 0.5], [0.5, 0.9]]), sigma=0.1)


class TestSpectralCluster:
    def test_ideal_blocks_recovered_exactly(self):
        n1, n2 = 6, 9
        s = np.full((n1 + n2, n1 + n2), 1e-6)
        s[:n1, :n1] = 0.9
        s[n1:, n1:] = 0.8
        np.fill_diagonal(s, 1.0)
        a, b = spectral_cluster_2(TrajectorySimilarity(s, sigma=0.1), seed=0)
        assert list(a) == list(range(n1))
        assert list(b) == list(range(n1, n1 + n2))

    def test_all_ones_deterministic(self):
        s = np.ones((7, 7))
        first = spectral_cluster_2(TrajectorySimilarity(s, sigma=0.1), seed=3)
        second = spectral_cluster_2(TrajectorySimilarity(s, sigma=0.1), seed=3)
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])
        assert len(first[0]) + len(first[1]) == 7

    def test_zero_rows_split_off(self):
        s = np.eye(4) * 0.0
        s[0, 1] = s[1, 0] = 0.9
        s[0, 0] = s[1, 1] = 1.0  # rows 2 and 3 have (numerically) zero degree
        a, b = spectral_cluster_2(s, seed=0)
        sets = {frozenset(a.tolist()), frozenset(b.tolist())}
        assert sets == {frozenset({0, 1}), frozenset({2, 3})}

    def test_partition_property(self, rng):
        s = rng.uniform(0.05, 1.0, size=(12, 12))
        s = (s + s.T) / 2
        np.fill_diagonal(s, 1.0)
        a, b = spectral_cluster_2(TrajectorySimilarity(s, sigma=0.1), seed=1)
        assert sorted(np.concatenate([a, b]).tolist()) == list(range(12))
        assert len(a) > 0 and len(b) > 0

    def test_two_body_trajectories_recovered(self, rng):
        static = rng.uniform(-0.2, 0.2, size=(20, 3))
        moving = rng.uniform(-0.2, 0.2, size=(15, 3)) + [1.0, 0, 0]
        frames = []
        for t in range(6):
            shift = np.array([0.05 * t, 0.02 * t, 0.0])
            frames.append(np.vstack([static, moving + shift]))
        traj = make_traj(frames)
        sim = trajectory_similarity(traj, np.arange(35), (0, 5), sigma=0.01)
        a, b = spectral_cluster_2(sim, seed=0)
        expected_a = frozenset(range(20))
        got = {frozenset(a.tolist()), frozenset(b.tolist())}
        assert got == {expected_a, frozenset(range(20, 35))}


class TestPickMovingCluster:
    def test_translating_cluster_wins(self, rng):
        static = np.tile(rng.normal(size=(4, 3)), (5, 1, 1))
        moving = np.stack([rng.normal(size=(3, 3)) + [0.1 * t, 0, 0] for t in range(5)])
        frames = [np.vstack([static[t], moving[t]]) for t in range(5)]
        traj = make_traj(frames)
        got = pick_moving_cluster(traj, (np.array([0, 1, 2, 3]), np.array([4, 5, 6])), (0, 4))
        np.testing.assert_array_equal(got, [4, 5, 6])

    def test_static_tie_break_toward_point(self):
        frames = [np.array([[0.0, 0, 0], [1.0, 0, 0]])] * 3
        traj = make_traj(frames)
        got = pick_moving_cluster(traj, (np.array([0]), np.array([1])), (0, 2), tie_break_point=[1.1, 0, 0])
        np.testing.assert_array_equal(got, [1])
        got = pick_moving_cluster(traj, (np.array([0]), np.array([1])), (0, 2))
        np.testing.assert_array_equal(got, [0])


class TestUmeyama:
    def test_identity(self, rng):
        pts = rng.normal(size=(10, 3))
        pose = umeyama_rigid_fit(pts, pts)
        np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(pose.translation, 0.0, atol=1e-12)

    def test_recovers_rotation_and_translation(self, rng):
        pts = rng.normal(size=(20, 3))
        rot = rot_z(30.0)
        t = np.array([1.0, 2.0, 3.0])
        pose = umeyama_rigid_fit(pts, pts @ rot.T + t)
        np.testing.assert_allclose(pose.rotation, rot, atol=1e-10)
        np.testing.assert_allclose(pose.translation, t, atol=1e-10)

    def test_reflection_keeps_det_positive(self, rng):
        pts = rng.normal(size=(15, 3))
        mirrored = pts * [-1.0, 1.0, 1.0]
        pose = umeyama_rigid_fit(pts, mirrored)
        assert np.isclose(np.linalg.det(pose.rotation), 1.0)
        resid = np.linalg.norm(pose.apply(pts) - mirrored, axis=1)
        assert resid.max() > 0.1  # reflections are not reachable by proper rotations

    def test_too_few_points(self):
        with pytest.raises(DegenerateInputError):
            umeyama_rigid_fit(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_points_degenerate(self):
        src = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])
        with pytest.raises(DegenerateInputError):
            umeyama_rigid_fit(src, src + [0.0, 1.0, 0.0])

    def test_planar_points_are_fine(self, rng):
        src = np.column_stack([rng.normal(size=(10, 2)), np.zeros(10)])
        rot = rot_z(45.0)
        pose = umeyama_rigid_fit(src, src @ rot.T)
        np.testing.assert_allclose(pose.rotation, rot, atol=1e-9)

    @given(angle=st.floats(-3.0, 3.0), shift=st.floats(-2.0, 2.0))
    def test_residual_invariant_under_pre_transform(self, angle, shift):
        rng = np.random.default_rng(5)
        src = rng.normal(size=(12, 3))
        dst = src @ rot_z(25.0).T + [0.2, -0.1, 0.3] + rng.normal(scale=0.01, size=(12, 3))
        pose = umeyama_rigid_fit(src, dst)
        base = np.linalg.norm(pose.apply(src) - dst, axis=1)

        pre = RigidPose(rot_z(np.degrees(angle) % 360.0 - 180.0), np.array([shift, 0.0, -shift]))
        src2, dst2 = pre.apply(src), pre.apply(dst)
        pose2 = umeyama_rigid_fit(src2, dst2)
        moved = np.linalg.norm(pose2.apply(src2) - dst2, axis=1)
        np.testing.assert_allclose(moved, base, atol=1e-10)


class TestRansac:
    def test_noiseless_matches_full_umeyama(self, rng):
        src = rng.normal(size=(40, 3))
        rot = rot_z(40.0)
        dst = src @ rot.T + [0.5, 0.0, -0.2]
        pose, inliers = ransac_rigid(src, dst, inlier_dist=0.01, iters=100, seed=2)
        assert len(inliers) == 40
        full = umeyama_rigid_fit(src, dst)
        np.testing.assert_array_equal(pose.rotation, full.rotation)
        np.testing.assert_array_equal(pose.translation, full.translation)

    def test_mixture_recall_and_accuracy(self, rng):
        n = 200
        src = rng.uniform(-0.5, 0.5, size=(n, 3))
        rot = random_rotation(rng)
        t = np.array([0.3, -0.1, 0.2])
        dst = src @ rot.T + t + rng.normal(scale=0.0005, size=(n, 3))
        outliers = rng.choice(n, size=60, replace=False)
        dst[outliers] += rng.uniform(0.05, 0.5, size=(60, 3)) * rng.choice([-1, 1], size=(60, 3))
        pose, inliers = ransac_rigid(src, dst, inlier_dist=0.01, iters=500, seed=0)
        true_inliers = np.setdiff1d(np.arange(n), outliers)
        recall = len(np.intersect1d(inliers, true_inliers)) / len(true_inliers)
        assert recall > 0.99
        assert np.linalg.norm(pose.translation - t) < 1e-3
        assert rotation_geodesic_deg(pose.rotation, rot) < 0.2

    def test_all_outliers_no_consensus(self, rng):
        src = rng.uniform(-1, 1, size=(30, 3))
        dst = rng.uniform(-1, 1, size=(30, 3))
        with pytest.raises(NoConsensusError):
            ransac_rigid(src, dst, inlier_dist=1e-6, iters=50, seed=1)

    def test_deterministic_given_seed(self, rng):
        src = rng.normal(size=(25, 3))
        dst = src @ rot_z(10.0).T + 0.1
        dst[:5] += 0.3
        a = ransac_rigid(src, dst, inlier_dist=0.01, iters=200, seed=9)
        b = ransac_rigid(src, dst, inlier_dist=0.01, iters=200, seed=9)
        np.testing.assert_array_equal(a[0].rotation, b[0].rotation)
        np.testing.assert_array_equal(a[1], b[1])

    def test_too_few_pairs(self):
        with pytest.raises(InputError):
            ransac_rigid(np.zeros((2, 3)), np.zeros((2, 3)), inlier_dist=0.1)


def hinge_scene(rng, n_static=40, n_door=30, frames=8, angle_deg=40.0):
    """Analytic trajectories: static wall plus a panel rotating about the y axis at x=0."""
    wall = rng.uniform(-0.5, 0.5, size=(n_static, 3)) + [-0.6, 0.0, 0.0]
    door = np.column_stack(
        [rng.uniform(0.1, 0.5, n_door), rng.uniform(-0.4, 0.4, n_door), rng.normal(0, 0.01, n_door)]
    )
    actor = np.array([[0.45, 0.0, -0.06]])
    arrays = []
    poses = []
    for t in range(frames):
        theta = np.radians(angle_deg) * t / (frames - 1)
        rot = np.array(
            [
                [np.cos(theta), 0, np.sin(theta)],
                [0, 1, 0],
                [-np.sin(theta), 0, np.cos(theta)],
            ]
        )
        door_t = door @ rot.T
        actor_t = actor @ rot.T + [0.0, 0.0, -0.06]
        arrays.append(np.vstack([wall, door_t, actor_t]))
        poses.append(RigidPose(rot, np.zeros(3)))
    labels = np.r_[np.zeros(n_static + n_door, bool), np.ones(1, bool)]
    traj = make_traj(arrays, labels)
    event = ContactEvent(
        start_frame=0,
        end_frame=frames - 1,
        actor_points=[n_static + n_door],
        background_points=[n_static + 5],
        contact_centroid_per_frame=np.stack(
            [arrays[t][n_static + 5] for t in range(frames)]
        ),
    )
    return traj, event, poses, np.arange(n_static, n_static + n_door)


class TestSegmentObject:
    def test_hinge_rotation_recovered(self, rng):
        traj, event, poses, door_ids = hinge_scene(rng)
        params = ObjectSegmentationParams(attention_radius=0.8, inlier_dist=0.01, seed=0)
        result = segment_object(traj, event, params)
        assert set(result.segment) == set(door_ids.tolist())
        assert len(result.poses) == event.n_frames
        np.testing.assert_allclose(result.poses[0].rotation, np.eye(3))
        for k, pose in enumerate(result.poses):
            np.testing.assert_allclose(pose.rotation, poses[k].rotation, atol=1e-6)
        axis = rotation_axis(result.poses[-1].rotation)
        angle_to_y = np.degrees(np.arccos(abs(axis @ np.array([0.0, 1.0, 0.0]))))
        assert angle_to_y < 0.1

    def test_segment_subset_of_every_frame_inliers(self, rng):
        traj, event, _, _ = hinge_scene(rng)
        params = ObjectSegmentationParams(attention_radius=0.8, inlier_dist=0.01, seed=0)
        result = segment_object(traj, event, params)
        assert len(result.frame_inlier_sets) == event.n_frames - 1
        for inliers in result.frame_inlier_sets:
            assert set(result.segment) <= set(inliers.tolist())

    def test_static_scene_yields_identity_poses(self, rng):
        pts = rng.uniform(-0.3, 0.3, size=(30, 3))
        actor = np.array([[0.0, 0.0, -0.4]])
        arrays = [np.vstack([pts, actor])] * 5
        labels = np.r_[np.zeros(30, bool), np.ones(1, bool)]
        traj = make_traj(arrays, labels)
        event = ContactEvent(0, 4, [30], [0], np.tile(pts[0], (5, 1)))
        result = segment_object(traj, event, ObjectSegmentationParams(attention_radius=1.0, seed=0))
        for pose in result.poses:
            np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-9)
            np.testing.assert_allclose(pose.translation, 0.0, atol=1e-9)
        # every static background point is consistent with the identity motion
        assert set(result.segment) == set(range(30))

    def test_incoherent_motion_fails_loudly(self, rng):
        # background points follow incompatible motions after frame 1; any of the
        # documented failure modes may fire, but garbage must never be returned
        pts = rng.uniform(-0.2, 0.2, size=(12, 3))
        arrays = [pts.copy()]
        for t in range(1, 4):
            jumbled = pts + rng.uniform(-0.5, 0.5, size=pts.shape) * (t > 1)
            arrays.append(np.vstack([jumbled]))
        actor = np.array([[0.0, 0.0, -0.3]])
        arrays = [np.vstack([a, actor]) for a in arrays]
        labels = np.r_[np.zeros(12, bool), np.ones(1, bool)]
        traj = make_traj(arrays, labels)
        event = ContactEvent(0, 3, [12], [0], np.tile(pts[0], (4, 1)))
        with pytest.raises((ObjectLostError, NoConsensusError, DegenerateInputError)) as err:
            segment_object(traj, event, ObjectSegmentationParams(attention_radius=1.0, inlier_dist=1e-4, seed=0))
        if isinstance(err.value, ObjectLostError):
            assert len(err.value.inlier_counts) >= 1

    def test_object_lost_error_carries_counts(self):
        err = ObjectLostError("empty intersection", inlier_counts=[5, 3, 0])
        assert err.inlier_counts == (5, 3, 0)

    def test_event_window_validated(self, rng):
        traj, event, _, _ = hinge_scene(rng, frames=4)
        bad = ContactEvent(0, 10, event.actor_points, event.background_points, np.zeros((11, 3)))
        with pytest.raises(InputError):
            segment_object(traj, bad)


class TestRigidPose:
    def test_orthonormality_enforced(self):
        with pytest.raises(InputError):
            RigidPose(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(InputError):
            RigidPose(-np.eye(3), np.zeros(3))

    def test_compose_and_inverse(self, rng):
        a = RigidPose(rot_z(30), rng.normal(size=3))
        b = RigidPose(random_rotation(rng), rng.normal(size=3))
        pts = rng.normal(size=(5, 3))
        np.testing.assert_allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)
        ident = a.compose(a.inverse())
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(ident.apply(pts), pts, atol=1e-12)

    def test_geodesic_of_known_rotation(self):
        assert np.isclose(rotation_geodesic_deg(np.eye(3), rot_z(10.0)), 10.0, atol=1e-9)


def test_object_result_json_round_trip(tmp_path, rng):
    traj, event, _, _ = hinge_scene(rng)
    result = segment_object(traj, event, ObjectSegmentationParams(attention_radius=0.8, seed=0))
    path = tmp_path / "object_0.json"
    save_object_result(path, result)
    back = load_object_result(path)
    np.testing.assert_array_equal(back.segment, result.segment)
    np.testing.assert_array_equal(back.initial_cluster, result.initial_cluster)
    assert back.start_frame == result.start_frame and back.end_frame == result.end_frame
    for a, b in zip(back.poses, result.poses):
        np.testing.assert_allclose(a.rotation, b.rotation)
        np.testing.assert_allclose(a.translation, b.translation)
