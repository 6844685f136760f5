import math

import numpy as np
import pytest

from core.netsched.errors import (
    ConfigMismatch,
    EmptyHistogram,
    FlowIdOutOfRange,
    NoCompletedFiles,
    TooFewCheckpoints,
)
from core.netsched.stats import (
    Checkpoint,
    SimStats,
    Trend,
    basta_distance,
    block_means,
    check_conservation,
    checkpoint_means,
    config_fingerprint,
    divergence_diagnostic,
    littles_law_residual,
    merge,
    merge_all,
    summary_row,
    truncated_means,
)


def random_stats(rng: np.random.Generator, tag: int, F: int = 2) -> SimStats:
    st = SimStats("abc", F)
    st.slots = int(rng.integers(1, 1000))
    st.sum_q = rng.integers(0, 10_000, F)
    st.sum_q_pow = rng.random((len(st.exponents), F)) * 100
    st.trunc_q = rng.integers(0, 10_000, (len(st.truncations), F))
    st.sum_files = rng.integers(0, 1000, F)
    st.file_arrivals = rng.integers(0, 500, F)
    st.files_completed = rng.integers(0, 500, F)
    st.sum_delay = rng.integers(0, 5000, F)
    st.trunc_delay = rng.integers(0, 5000, (len(st.truncations), F))
    st.hist_q = [rng.integers(0, 50, int(rng.integers(1, 8))) for _ in range(F)]
    st.hist_arrival = [rng.integers(0, 50, int(rng.integers(1, 8))) for _ in range(F)]
    st.checkpoints = [Checkpoint(tag, 100, tuple(rng.random(F)))]
    st.cycles = int(rng.integers(0, 100))
    st.sum_cycle_len = int(rng.integers(0, 1000))
    st.sum_cycle_len_sq = int(rng.integers(0, 10_000))
    st.packets_arrived = rng.integers(0, 1000, F)
    return st


def assert_same(a: SimStats, b: SimStats, exact_pow: bool = True):
    for name in ("sum_q", "trunc_q", "sum_files", "file_arrivals", "files_completed", "sum_delay",
                 "trunc_delay", "packets_arrived", "packets_served", "final_q"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    if exact_pow:
        assert np.array_equal(a.sum_q_pow, b.sum_q_pow)
    else:
        assert np.allclose(a.sum_q_pow, b.sum_q_pow, rtol=1e-12)
    for x, y in zip(a.hist_q + a.hist_arrival, b.hist_q + b.hist_arrival):
        assert np.array_equal(x, y)
    assert (a.slots, a.cycles, a.sum_cycle_len, a.sum_cycle_len_sq, a.wasted_slots) == \
        (b.slots, b.cycles, b.sum_cycle_len, b.sum_cycle_len_sq, b.wasted_slots)
    assert a.checkpoints == b.checkpoints


# --- merge algebra ---
def test_merge_associative_and_commutative():
    rng = np.random.default_rng(2024)
    for i in range(1000):
        a, b, c = (random_stats(rng, 3 * i + k) for k in range(3))
        assert_same(merge(merge(a, b), c), merge(a, merge(b, c)), exact_pow=False)
        assert_same(merge(a, b), merge(b, a))


def test_merge_identity():
    rng = np.random.default_rng(1)
    a = random_stats(rng, 0)
    assert_same(merge(a, SimStats.empty(a)), a)


def test_merge_pads_histograms():
    a, b = SimStats("x", 1), SimStats("x", 1)
    a.hist_q = [np.array([1, 2])]
    b.hist_q = [np.array([1, 1, 1, 5])]
    assert merge(a, b).hist_q[0].tolist() == [2, 3, 1, 5]


def test_merge_mismatch(caplog):
    with pytest.raises(ConfigMismatch):
        merge(SimStats("a", 2), SimStats("b", 2))
    assert "Refusing to merge" in caplog.text


def test_merge_all_empty():
    with pytest.raises(ValueError):
        merge_all([])


def test_fingerprint_stable():
    assert config_fingerprint({"b": 1, "a": [1, 2]}) == config_fingerprint({"a": [1, 2], "b": 1})
    assert config_fingerprint({"a": 1}) != config_fingerprint({"a": 2})


# --- Little / BASTA ---
def test_littles_law_exact():
    st = SimStats("x", 1)
    st.slots = 100
    st.sum_files = np.array([30])
    st.file_arrivals = np.array([10])
    st.files_completed = np.array([10])
    st.sum_delay = np.array([30])
    assert littles_law_residual(st, 0) == pytest.approx(0.0)


def test_littles_law_no_files():
    st = SimStats("x", 1)
    st.slots = 10
    with pytest.raises(NoCompletedFiles):
        littles_law_residual(st, 0)


def test_basta_distance():
    st = SimStats("x", 1)
    st.hist_q = [np.array([5, 5])]
    st.hist_arrival = [np.array([1, 0, 1])]
    # CDF: (0.5, 1, 1) vs (0.5, 0.5, 1)
    assert basta_distance(st, 0) == pytest.approx(0.5)


def test_basta_empty():
    st = SimStats("x", 1)
    st.hist_q = [np.array([3])]
    with pytest.raises(EmptyHistogram):
        basta_distance(st, 0)


def test_flow_out_of_range():
    with pytest.raises(FlowIdOutOfRange):
        truncated_means(SimStats("x", 1), 1)


# --- divergence diagnostic ---
def with_checkpoints(*series):
    st = SimStats("x", 1)
    for tag, means in enumerate(series):
        st.checkpoints += [Checkpoint(tag, 10 ** (k + 4), (m,)) for k, m in enumerate(means)]
    return st


@pytest.mark.parametrize("means,trend", [
    ((1.0, 2.0, 4.0, 8.0), Trend.DIVERGING),
    ((1.0, 1.05, 1.0, 0.98), Trend.CONVERGING),
    ((1.0, 2.0, 2.1, 2.2), Trend.INCONCLUSIVE),
    ((1.0, 1.6, 2.5), Trend.INCONCLUSIVE),      # 比は 1.5 以上だが合計 < 4
    ((0.0, 0.0, 0.0), Trend.CONVERGING),
    ((0.0, 1.0, 2.0, 4.0), Trend.DIVERGING),
])
def test_divergence_trend(means, trend):
    assert divergence_diagnostic(with_checkpoints(means), 0).trend == trend


def test_divergence_averages_replications():
    st = with_checkpoints((1.0, 2.0, 4.0), (3.0, 6.0, 12.0))
    slots, means = checkpoint_means(st, 0)
    assert slots == (10 ** 4, 10 ** 5, 10 ** 6)
    assert means == (2.0, 4.0, 8.0)
    assert divergence_diagnostic(st, 0).trend == Trend.DIVERGING


def test_divergence_too_few():
    with pytest.raises(TooFewCheckpoints):
        divergence_diagnostic(with_checkpoints((1.0, 2.0)), 0)


def running_from_blocks(blocks, slots=(10 ** 4, 10 ** 5, 10 ** 6, 10 ** 7)):
    out, total, prev = [], 0.0, 0
    for s, b in zip(slots, blocks):
        total += b * (s - prev)
        prev = s
        out.append(total / s)
    return tuple(out)


def test_block_means_invert_running_means():
    blocks = (2.0, 3.0, 0.5, 7.0)
    slots = (10 ** 4, 10 ** 5, 10 ** 6, 10 ** 7)
    assert block_means(slots, running_from_blocks(blocks)) == pytest.approx(blocks)


def test_block_basis_tracks_steady_growth():
    # 区間平均が 1 桁ごとに 1.6 倍。実行平均の比は 0.1 + 0.9 * 1.6 程度に鈍る
    st = with_checkpoints(running_from_blocks((1.0, 1.6, 2.56, 4.096)))
    block = divergence_diagnostic(st, 0)
    assert block.trend == Trend.DIVERGING
    assert block.ratios == pytest.approx((1.6, 1.6, 1.6))
    assert divergence_diagnostic(st, 0, basis="running").trend == Trend.INCONCLUSIVE


def test_block_basis_stable_queue_converges():
    st = with_checkpoints(running_from_blocks((3.0, 3.1, 2.95, 3.02)))
    assert divergence_diagnostic(st, 0).trend == Trend.CONVERGING


def test_divergence_unknown_basis():
    with pytest.raises(ValueError):
        divergence_diagnostic(with_checkpoints((1.0, 2.0, 4.0)), 0, basis="median")


# --- truncated means / summary ---
def test_truncated_means():
    st = SimStats("x", 1, truncations=(10, 100))
    st.slots = 4
    st.trunc_q = np.array([[20], [150]])
    st.files_completed = np.array([2])
    st.trunc_delay = np.array([[12], [40]])
    assert truncated_means(st, 0) == {10: (5.0, 6.0), 100: (37.5, 20.0)}


def test_truncated_delay_nan_without_files():
    st = SimStats("x", 1, truncations=(10,))
    st.slots = 4
    assert math.isnan(truncated_means(st, 0)[10][1])


def test_summary_row_columns():
    st = with_checkpoints((1.0, 1.0, 1.0))
    st.slots = 10
    row = summary_row(st, 0)
    assert list(row)[:3] == ["T", "mean_q", "mean_q_alpha"]
    assert "trunc_q_M100000" in row and "trunc_delay_M10" in row
    assert "ckpt_10000" in row and "ckpt_1000000" in row
    assert math.isnan(row["littles_residual"])
    assert list(row)[-2:] == ["cycles", "mean_cycle_len"]


def test_check_conservation():
    st = SimStats("x", 2)
    st.packets_arrived = np.array([5, 3])
    st.packets_served = np.array([4, 3])
    st.final_q = np.array([1, 0])
    check_conservation(st)
    st.final_q = np.array([0, 0])
    with pytest.raises(RuntimeError):
        check_conservation(st)
