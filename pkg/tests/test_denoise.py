import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hardsift import backbone, denoise
from hardsift.errors import ValidationError

DEFAULTS = denoise.ScheduleConfig()


# thresholds at the curriculum's corners, hand-evaluated from the piecewise forms
@pytest.mark.parametrize(
    "t_factor, pos, neg, pair",
    [
        (0, 8.0, 2.0, 7.0),
        (1, 7.0, 3.0, 6.0),
        (3, 6.0, 4.0, 4.0),
    ],
)
def test_threshold_schedule_corners(t_factor, pos, neg, pair):
    t = int(t_factor * DEFAULTS.alpha)
    assert denoise.epsilon_pos(t, DEFAULTS) == pytest.approx(pos)
    assert denoise.epsilon_neg(t, DEFAULTS) == pytest.approx(neg)
    assert denoise.epsilon_pair(t, DEFAULTS) == pytest.approx(pair)


def test_threshold_schedule_saturates():
    t = 10**9
    assert denoise.epsilon_pos(t, DEFAULTS) == 6.0
    assert denoise.epsilon_neg(t, DEFAULTS) == 4.0
    assert denoise.epsilon_pair(t, DEFAULTS) == 3.0


def test_drop_count_ramp_and_cap():
    cfg = denoise.ScheduleConfig(alpha=3.0, eps_l_max=0.05)
    # ramp still below the cap: min(30/3, 0.05 * 1024) = min(10, 51.2)
    assert denoise.epsilon_l(30, cfg, batch_size=1024) == 10
    assert denoise.epsilon_l(0, cfg, batch_size=1024) == 0
    # capped: min(10**6, 51.2) floors to 51
    assert denoise.epsilon_l(3 * 10**6, cfg, batch_size=1024) == 51
    assert denoise.epsilon_l(7, cfg, batch_size=1024) == 2  # floor(7/3)


@given(
    t=st.integers(0, 10**9),
    alpha=st.floats(0.5, 10**5),
    batch=st.integers(1, 4096),
)
@settings(max_examples=300)
def test_drop_count_matches_reference(t, alpha, batch):
    cfg = denoise.ScheduleConfig(alpha=alpha, eps_l_max=0.05)
    assert denoise.epsilon_l(t, cfg, batch) == oracles.epsilon_l_ref(t, alpha, 0.05, batch)


@given(t=st.integers(0, 10**8), step=st.integers(1, 10**6), alpha=st.floats(1.0, 10**4))
@settings(max_examples=300)
def test_schedules_are_monotone_in_t(t, step, alpha):
    cfg = denoise.ScheduleConfig(alpha=alpha)
    later = t + step
    assert denoise.epsilon_l(later, cfg, 1024) >= denoise.epsilon_l(t, cfg, 1024)
    assert denoise.epsilon_pos(later, cfg) <= denoise.epsilon_pos(t, cfg)
    assert denoise.epsilon_neg(later, cfg) >= denoise.epsilon_neg(t, cfg)
    assert denoise.epsilon_pair(later, cfg) <= denoise.epsilon_pair(t, cfg)
    # and every threshold stays inside its clamp band
    assert 6.0 <= denoise.epsilon_pos(t, cfg) <= 8.0
    assert 2.0 <= denoise.epsilon_neg(t, cfg) <= 4.0
    assert 3.0 <= denoise.epsilon_pair(t, cfg) <= 7.0


def test_schedule_config_rejects_bad_values():
    with pytest.raises(ValidationError):
        denoise.ScheduleConfig(alpha=0.0)
    with pytest.raises(ValidationError):
        denoise.ScheduleConfig(eps_l_max=-0.1)
    with pytest.raises(ValidationError):
        denoise.ScheduleConfig(eps_v=1.5)
    with pytest.raises(ValidationError):
        denoise.ScheduleConfig(m=0)
    with pytest.raises(ValidationError):
        denoise.ScheduleConfig(eps_pos_max=5.0, eps_pos_min=6.0)


def test_partition_by_loss_takes_highest():
    losses = np.array([0.2, 0.9, 0.1, 0.7, 0.5])
    part = denoise.partition_by_loss(losses, drop_count=2)
    assert part.noisy.tolist() == [1, 3]
    assert part.clean.tolist() == [0, 2, 4]


def test_partition_by_loss_breaks_ties_by_index():
    losses = np.array([0.5, 0.5, 0.5, 0.5])
    part = denoise.partition_by_loss(losses, drop_count=2)
    assert part.noisy.tolist() == [0, 1]


def test_partition_zero_drop_is_all_clean():
    part = denoise.partition_by_loss(np.array([0.3, 0.1]), drop_count=0)
    assert part.noisy.size == 0
    assert part.clean.tolist() == [0, 1]


def test_assemble_training_set_restores_hard():
    part = denoise.BatchPartition(
        size=6,
        noisy=np.array([1, 4, 5]),
        hard_candidates=np.array([4, 5]),
        hard=np.array([5]),
    )
    kept = denoise.assemble_training_set(6, part)
    assert kept.tolist() == [0, 2, 3, 5]


def test_partition_check_catches_leaks():
    bad = denoise.BatchPartition(
        size=4,
        noisy=np.array([1]),
        hard_candidates=np.array([2]),  # not a subset of noisy
        hard=np.array([], dtype=int),
    )
    with pytest.raises(ValidationError):
        bad.check()


def test_window_variance_frozen_value():
    got = denoise.window_variance(np.array([0.2, 0.4, 0.6]), m=3)
    assert got == pytest.approx(float(oracles.population_variance_ref([0.2, 0.4, 0.6])))
    assert got == pytest.approx(0.02666666666666667, abs=1e-15)


def test_prediction_history_readiness(small_world, small_split):
    model = backbone.init_model(
        backbone.MF, small_world.dataset.user_count, small_world.dataset.item_count, dim=4, seed=1
    )
    hist = denoise.PredictionHistory.for_split(small_split, m=3)
    assert hist.variances() is None
    hist.record(0, model)
    hist.record(1, model)
    assert hist.variances() is None
    hist.record(2, model)
    var = hist.variances()
    assert var is not None and var.shape == (len(hist),)
    # a frozen model predicts the same score every epoch
    np.testing.assert_allclose(var, 0.0, atol=1e-18)


def test_prediction_history_rejects_stale_epochs(small_world, small_split):
    model = backbone.init_model(
        backbone.MF, small_world.dataset.user_count, small_world.dataset.item_count, dim=4, seed=1
    )
    hist = denoise.PredictionHistory.for_split(small_split, m=2)
    hist.record(0, model)
    with pytest.raises(ValidationError):
        hist.record(0, model)


def test_prediction_history_window_slides(small_world, small_split):
    model = backbone.init_model(
        backbone.MF, small_world.dataset.user_count, small_world.dataset.item_count, dim=4, seed=1
    )
    hist = denoise.PredictionHistory.for_split(small_split, m=2)
    hist.record(0, model)
    model.user_embeddings *= 2.0
    hist.record(1, model)
    first = hist.variances().copy()
    model.user_embeddings *= 2.0
    hist.record(2, model)  # window now holds epochs 1 and 2
    second = hist.variances()
    assert not np.allclose(first, second)
    user, item = int(hist.users[0]), int(hist.items[0])
    assert hist.variance(user, item) == pytest.approx(second[0])


def test_prune_takes_top_share_per_side():
    noisy = np.arange(8)
    pos_var = np.array([0.9, np.nan, 0.1, 0.5, np.nan, np.nan, np.nan, np.nan])
    neg_var = np.array([np.nan, 0.3, np.nan, np.nan, 0.8, 0.2, np.nan, np.nan])
    kept = denoise.prune_candidates(noisy, pos_var, neg_var, eps_v=0.5)
    # ready positives {0, 2, 3}: ceil(1.5) = 2 of them, highest variance first
    # ready negatives {1, 4, 5}: likewise
    assert kept.tolist() == [0, 1, 3, 4]


def test_prune_eps_v_zero_keeps_nothing():
    noisy = np.array([0, 1, 2])
    var = np.array([0.5, 0.6, 0.7])
    nothing = denoise.prune_candidates(noisy, var, np.full(3, np.nan), eps_v=0.0)
    assert nothing.size == 0


def test_prune_with_no_ready_pairs():
    noisy = np.array([0, 1])
    empty = denoise.prune_candidates(noisy, np.full(2, np.nan), np.full(2, np.nan), eps_v=0.5)
    assert empty.size == 0


def test_prune_tie_prefers_lower_index():
    noisy = np.arange(4)
    pos_var = np.array([0.5, 0.5, 0.5, 0.5])
    kept = denoise.prune_candidates(noisy, pos_var, np.full(4, np.nan), eps_v=0.5)
    assert kept.tolist() == [0, 1]


def test_random_prune_draws_from_ready_pool():
    rng = np.random.default_rng([0, 6, 17])
    pool = np.array([3, 5, 9, 11])
    picked = denoise.random_prune_baseline(pool, count=2, rng=rng)
    assert picked.size == 2
    assert set(picked.tolist()) <= set(pool.tolist())
    everything = denoise.random_prune_baseline(pool, count=4, rng=rng)
    assert sorted(everything.tolist()) == sorted(pool.tolist())
    with pytest.raises(ValidationError):
        denoise.random_prune_baseline(pool, count=5, rng=rng)


def test_pointwise_rescue_directions():
    cfg = denoise.ScheduleConfig(alpha=1.0)
    t = 10**6  # saturated: eps_pos 6, eps_neg 4
    assert denoise.identify_hard_pointwise(6.0, 1, denoise.epsilon_pos(t, cfg), denoise.epsilon_neg(t, cfg))
    assert not denoise.identify_hard_pointwise(5.9, 1, denoise.epsilon_pos(t, cfg), denoise.epsilon_neg(t, cfg))
    assert denoise.identify_hard_pointwise(4.0, 0, denoise.epsilon_pos(t, cfg), denoise.epsilon_neg(t, cfg))
    assert not denoise.identify_hard_pointwise(4.1, 0, denoise.epsilon_pos(t, cfg), denoise.epsilon_neg(t, cfg))


def test_pointwise_rescue_literal_flips_comparisons():
    # the written-out rule reads "below the positive threshold", the
    # consistent rule keeps confident positives; both are exposed
    assert denoise.identify_hard_pointwise(5.0, 1, 6.0, 4.0, literal=True)
    assert not denoise.identify_hard_pointwise(7.0, 1, 6.0, 4.0, literal=True)
    assert denoise.identify_hard_pointwise(5.0, 0, 6.0, 4.0, literal=True)


def test_pairwise_rescue_threshold():
    assert denoise.identify_hard_pairwise(9.0, 3.0, eps_pair=5.0)
    assert not denoise.identify_hard_pairwise(8.0, 3.0, eps_pair=5.0)  # strict
    assert not denoise.identify_hard_pairwise(3.0, 9.0, eps_pair=5.0)
