import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from warptrack import InputError, PointCloud
from warptrack.contacts import ContactEvent, detect_contacts, load_contacts, save_contacts
from warptrack.tracking import LabeledTrajectorySet, TrajectorySet


def scripted_pair(distances):
    """Two-point scene: background fixed at origin, actor at (d_t, 0, 0)."""
    states = tuple(
        PointCloud([[0.0, 0.0, 0.0], [d, 0.0, 0.0]]) for d in distances
    )
    return LabeledTrajectorySet(TrajectorySet(states), np.array([False, True]))


def blob_scene(distances, rng, n=12):
    """Actor blob approaching a background blob along x by scripted center distances."""
    bg = rng.uniform(-0.05, 0.05, size=(n, 3))
    actor = rng.uniform(-0.05, 0.05, size=(n, 3))
    states = []
    for d in distances:
        states.append(PointCloud(np.vstack([bg, actor + [d, 0.0, 0.0]])))
    labels = np.r_[np.zeros(n, bool), np.ones(n, bool)]
    return LabeledTrajectorySet(TrajectorySet(tuple(states)), labels)


class TestDetectContacts:
    def test_approach_touch_retreat_interval(self):
        d = [1.0, 0.8, 0.6, 0.4, 0.2, 0.02, 0.015, 0.01, 0.015, 0.02, 0.3, 0.6]
        traj = scripted_pair(d)
        events = detect_contacts(traj, contact_dist=0.05, min_duration=3)
        assert len(events) == 1
        assert (events[0].start_frame, events[0].end_frame) == (5, 9)

    def test_never_close_gives_no_events(self):
        traj = scripted_pair([1.0, 0.9, 0.8, 0.7, 0.9, 1.0])
        assert detect_contacts(traj, contact_dist=0.05) == []

    def test_short_touch_debounced(self):
        d = [1.0, 1.0, 1.0, 0.01, 1.0, 1.0]
        traj = scripted_pair(d)
        assert detect_contacts(traj, contact_dist=0.05, min_duration=2) == []
        events = detect_contacts(traj, contact_dist=0.05, min_duration=1)
        assert len(events) == 1 and events[0].start_frame == events[0].end_frame == 3

    def test_participants_and_centroids(self, rng):
        traj = blob_scene([0.5, 0.01, 0.01, 0.01, 0.5], rng)
        events = detect_contacts(traj, contact_dist=0.2, min_duration=2)
        assert len(events) == 1
        e = events[0]
        assert set(e.background_points) <= set(range(12))
        assert set(e.actor_points) <= set(range(12, 24))
        assert e.contact_centroid_per_frame.shape == (e.n_frames, 3)
        expected = traj.trajectories.positions[e.start_frame, e.background_points].mean(axis=0)
        np.testing.assert_allclose(e.contact_centroid_per_frame[0], expected)

    def test_all_one_label_rejected(self):
        states = (PointCloud([[0.0, 0, 0], [1.0, 0, 0]]),) * 2
        traj = LabeledTrajectorySet(TrajectorySet(states), np.array([True, True]))
        with pytest.raises(InputError):
            detect_contacts(traj)

    def test_events_disjoint_and_sorted(self):
        d = [1, 0.01, 0.01, 0.01, 1, 1, 0.01, 0.01, 0.01, 1]
        events = detect_contacts(scripted_pair(d), contact_dist=0.05, min_duration=2)
        assert [(e.start_frame, e.end_frame) for e in events] == [(1, 3), (6, 8)]

    def test_symmetry_under_label_swap(self, rng):
        traj = blob_scene([0.5, 0.01, 0.01, 0.01, 0.5], rng)
        swapped = LabeledTrajectorySet(traj.trajectories, ~traj.labels)
        ev_a = detect_contacts(traj, contact_dist=0.2, min_duration=2)
        ev_b = detect_contacts(swapped, contact_dist=0.2, min_duration=2)
        assert [(e.start_frame, e.end_frame) for e in ev_a] == [
            (e.start_frame, e.end_frame) for e in ev_b
        ]
        assert set(ev_a[0].actor_points) == set(ev_b[0].background_points)
        assert set(ev_a[0].background_points) == set(ev_b[0].actor_points)

    def test_disconnected_simultaneous_contacts_split(self):
        # two background points 1 m apart; two actor points touch both at once
        states = (
            PointCloud([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0], [1.0, 1.0, 0]]),
            PointCloud([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0.01, 0], [1.0, 0.01, 0]]),
            PointCloud([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0.01, 0], [1.0, 0.01, 0]]),
        )
        labels = np.array([False, False, True, True])
        traj = LabeledTrajectorySet(TrajectorySet(states), labels)
        events = detect_contacts(traj, contact_dist=0.05, min_duration=2)
        assert len(events) == 2
        assert all(e.start_frame == 1 and e.end_frame == 2 for e in events)
        assert {int(e.background_points[0]) for e in events} == {0, 1}
        assert {int(e.actor_points[0]) for e in events} == {2, 3}

    @given(
        profile=st.lists(st.sampled_from([0.01, 0.03, 0.2, 1.0]), min_size=4, max_size=20),
        t1=st.floats(0.02, 0.5),
        t2=st.floats(0.02, 0.5),
    )
    def test_enlarging_threshold_grows_events(self, profile, t1, t2):
        lo, hi = sorted([t1, t2])
        traj = scripted_pair(profile)
        small = detect_contacts(traj, contact_dist=lo, min_duration=1)
        big = detect_contacts(traj, contact_dist=hi, min_duration=1)
        frames_small = {t for e in small for t in range(e.start_frame, e.end_frame + 1)}
        frames_big = {t for e in big for t in range(e.start_frame, e.end_frame + 1)}
        assert frames_small <= frames_big
        # every small event is contained in exactly one big event
        for e in small:
            assert any(
                b.start_frame <= e.start_frame and e.end_frame <= b.end_frame for b in big
            )

    def test_invalid_params(self):
        traj = scripted_pair([1.0, 1.0])
        with pytest.raises(InputError):
            detect_contacts(traj, contact_dist=0.0)
        with pytest.raises(InputError):
            detect_contacts(traj, min_duration=0)


class TestContactEvent:
    def test_invariants_enforced(self):
        with pytest.raises(InputError):
            ContactEvent(3, 2, [0], [1], np.zeros((1, 3)))
        with pytest.raises(InputError):
            ContactEvent(0, 1, [], [1], np.zeros((2, 3)))
        with pytest.raises(InputError):
            ContactEvent(0, 1, [0], [1], np.zeros((1, 3)))


def test_contacts_json_round_trip(tmp_path, rng):
    traj = blob_scene([0.5, 0.01, 0.01, 0.01, 0.5], rng)
    events = detect_contacts(traj, contact_dist=0.2, min_duration=2)
    path = tmp_path / "contacts.json"
    save_contacts(path, events)
    back = load_contacts(path)
    assert len(back) == len(events)
    for a, b in zip(events, back):
        assert (a.start_frame, a.end_frame) == (b.start_frame, b.end_frame)
        np.testing.assert_array_equal(a.actor_points, b.actor_points)
        np.testing.assert_array_equal(a.background_points, b.background_points)
        np.testing.assert_allclose(a.contact_centroid_per_frame, b.contact_centroid_per_frame)
