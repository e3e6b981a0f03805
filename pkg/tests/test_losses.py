import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from litm.errors import ConfigError, DimensionError
from litm.losses import MarginSchedule, Triplet, joint_loss, margins, triplet_loss
from litm.numeric import RandomSource

from oracles import central_difference, grad_close, sq_dist


@pytest.mark.parametrize("m0, deltas, expected", [
    (4, (3, 3), [4, 7, 10]),
    (1, (), [1]),
    (2, (0.5,), [2, 2.5]),
])
def test_margin_examples(m0, deltas, expected):
    assert margins(MarginSchedule(m0, deltas)) == expected


def test_margins_from_absolute_values():
    s = MarginSchedule.from_margins([4, 7, 10])
    assert s.m0 == 4 and s.deltas == (3.0, 3.0) and s.stages == 2


@pytest.mark.parametrize("m0, deltas", [(0, ()), (-1, (1,)), (4, (3, 0)), (4, (-1,))])
def test_margin_schedule_rejects_non_positive_values(m0, deltas):
    with pytest.raises(ConfigError):
        MarginSchedule(m0, deltas)


def test_triplet_loss_hand_examples():
    embs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
    # d_ap = 1, d_an = 1, margin 1 -> hinge 1
    loss, g = triplet_loss(embs, [Triplet(0, 1, 2)], 1.0)
    assert loss == 1.0
    assert g.tolist() == [[-2.0, 2.0], [2.0, 0.0], [0.0, -2.0], [0.0, 0.0]]
    # d_an = 9 is far beyond d_ap + m -> inactive
    loss, g = triplet_loss(embs, [Triplet(0, 1, 3)], 1.0)
    assert loss == 0.0 and not g.any()


def test_triplet_exactly_at_the_kink_has_zero_gradient():
    embs = np.array([[0.0], [1.0], [2.0]])
    loss, g = triplet_loss(embs, [(0, 1, 2)], 3.0)  # 1 - 4 + 3 = 0
    assert loss == 0.0 and not g.any()


def test_triplet_loss_is_a_sum_over_triplets():
    rng = RandomSource(3)
    embs = rng.normal(size=(5, 3))
    trips = [(0, 1, 2), (3, 4, 0), (2, 1, 4)]
    total, _ = triplet_loss(embs, trips, 2.0)
    parts = sum(triplet_loss(embs, [t], 2.0)[0] for t in trips)
    assert total == pytest.approx(parts, rel=1e-15)
    expected = sum(max(0.0, sq_dist(embs[a], embs[p]) - sq_dist(embs[a], embs[n]) + 2.0)
                   for a, p, n in trips)
    assert total == pytest.approx(expected, rel=1e-12)


def test_triplet_loss_gradient_matches_finite_differences():
    rng = RandomSource(8)
    embs = rng.normal(0, 0.5, size=(6, 4))
    trips = [(0, 1, 2), (1, 0, 3), (4, 5, 0), (5, 4, 1)]

    def fn(vec):
        return triplet_loss(vec.reshape(6, 4), trips, 1.0)[0]

    _, g = triplet_loss(embs, trips, 1.0)
    assert grad_close(g.ravel(), central_difference(fn, embs.ravel())).all()


def test_triplet_index_out_of_range():
    with pytest.raises(IndexError):
        triplet_loss(np.zeros((3, 2)), [(0, 1, 3)], 1.0)


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1))
def test_loss_is_translation_invariant(seed):
    rng = RandomSource(seed)
    embs = rng.normal(size=(5, 3))
    shift = rng.normal(size=3)
    trips = [(0, 1, 2), (3, 4, 1)]
    a, _ = triplet_loss(embs, trips, 1.5)
    b, _ = triplet_loss(embs + shift, trips, 1.5)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_joint_loss_with_one_stage_is_the_plain_triplet_loss():
    rng = RandomSource(2)
    F = rng.normal(size=(6, 1, 3))
    trips = [(0, 1, 2), (2, 3, 4), (5, 4, 0)]
    report, g = joint_loss(F, trips, MarginSchedule(4.0), [1.0])
    loss, g0 = triplet_loss(F[:, 0], trips, 4.0)
    assert report.total == loss and report.stage_losses == [loss]
    assert np.array_equal(g[:, 0], g0)


def test_joint_loss_weights_select_stages():
    rng = RandomSource(4)
    F = rng.normal(size=(6, 3, 2))
    trips = [(0, 1, 2), (3, 4, 5), (1, 0, 4)]
    sched = MarginSchedule(4, (3, 3))
    full, _ = joint_loss(F, trips, sched, [1, 1, 1])
    for j in range(3):
        lam = [0.0, 0.0, 0.0]
        lam[j] = 1.0
        only, g = joint_loss(F, trips, sched, lam)
        assert only.total == full.stage_losses[j]
        assert not np.delete(g, j, axis=1).any()
    assert full.total == pytest.approx(sum(full.stage_losses), rel=1e-15)
    assert full.stage_losses[0] == triplet_loss(F[:, 0], trips, 4.0)[0]
    assert full.stage_losses[2] == triplet_loss(F[:, 2], trips, 10.0)[0]


def test_joint_loss_report_statistics():
    F = np.array([[[0.0]], [[1.0]], [[3.0]]])
    report, _ = joint_loss(F, [(0, 1, 2)], MarginSchedule(1.0), [1.0])
    assert report.mean_d_ap == [1.0] and report.mean_d_an == [9.0]
    assert report.mean_gap == [8.0] and report.active_fraction == [0.0]
    assert set(report.as_dict()) == {"losses", "total", "d_ap", "d_an", "gap", "active"}


def test_joint_loss_stage_mismatch():
    with pytest.raises(DimensionError):
        joint_loss(np.zeros((3, 2, 2)), [(0, 1, 2)], MarginSchedule(4, (3, 3)), [1, 1, 1])
    with pytest.raises(DimensionError):
        joint_loss(np.zeros((3, 3, 2)), [(0, 1, 2)], MarginSchedule(4, (3, 3)), [1, 1])
