import numpy as np
import pytest

from core.netsched import arrivals as arr
from core.netsched.engine import (
    SimState,
    default_warmup,
    run,
    run_packed,
    step,
)
from core.netsched import codec
from core.netsched.errors import InvalidArrivalSpec, InvalidHorizon
from core.netsched.model import preset
from core.netsched.scheduling import MaxWeight, MaxWeightAlpha, ScheduleDecision, decide
from core.netsched.stats import littles_law_residual

# --- step ---
def test_step_serves_then_arrives(parallel2):
    state = SimState(2)
    serve0 = ScheduleDecision.of(parallel2.schedules[0], 2)
    step(state, serve0, [3, 0])
    assert state.q.tolist() == [3, 0]
    assert state.departed == []
    # 次のスロットで 1 パケット、さらに 2 スロットでファイル完了
    step(state, serve0, [0, 0])
    step(state, serve0, [0, 0])
    step(state, serve0, [0, 0])
    assert state.q.tolist() == [0, 0]
    assert len(state.departed) == 1
    rec = state.departed[0]
    assert rec.arrival_slot == 0 and rec.departure_slot == 3
    assert rec.delay == 3


def test_step_empty_queue_is_not_served(parallel2):
    state = SimState(2)
    step(state, ScheduleDecision.of(parallel2.schedules[1], 2), [1, 0])
    assert state.q.tolist() == [1, 0]
    assert state.served_last == 0


def test_step_fcfs_order(parallel2):
    state = SimState(2)
    serve0 = ScheduleDecision.of(parallel2.schedules[0], 2)
    step(state, serve0, [2, 0])   # file A (t=0)
    step(state, serve0, [1, 0])   # A を 1 つ処理、file B (t=1)
    step(state, serve0, [0, 0])   # A 完了
    assert [r.arrival_slot for r in state.departed] == [0]
    step(state, serve0, [0, 0])   # B 完了
    assert [r.arrival_slot for r in state.departed] == [1]
    assert state.departed[0].delay == 2


def test_step_minimum_delay_is_one(parallel2):
    state = SimState(2)
    serve0 = ScheduleDecision.of(parallel2.schedules[0], 2)
    step(state, serve0, [1, 0])
    step(state, serve0, [0, 0])
    assert state.departed[0].delay == 1


def test_step_departures_follow_arrival_order_per_flow(fig3):
    spec, _ = fig3
    specs = (arr.ArrivalSpec(0.2, arr.Geometric(0.4)), arr.ArrivalSpec(0.25, arr.Constant(2)), arr.bernoulli(0.3))
    rng = np.random.default_rng(8)
    state = SimState(3)
    done = {f: [] for f in range(3)}
    for _ in range(3000):
        A = [int(arr.sample_block(a, rng, 1)[0]) for a in specs]
        step(state, decide(MaxWeight(), state.q, spec, rng), A)
        for rec in state.departed:
            done[rec.flow].append(rec)
    for f, recs in done.items():
        assert recs, f"flow {f} never completed a file"
        assert all(a.arrival_slot <= b.arrival_slot for a, b in zip(recs, recs[1:]))
        assert all(a.departure_slot <= b.departure_slot for a, b in zip(recs, recs[1:]))
        assert all(r.delay >= r.size for r in recs)


# --- run ---
def test_run_is_deterministic(parallel2, light_pair):
    a = run(parallel2, light_pair, MaxWeight(), 20_000, 1000, seed=5, checkpoints=(5000, 10_000, 20_000))
    b = run(parallel2, light_pair, MaxWeight(), 20_000, 1000, seed=5, checkpoints=(5000, 10_000, 20_000))
    assert codec.pack_stats(a) == codec.pack_stats(b)


def test_run_block_size_does_not_change_result(fig1):
    spec, defaults = fig1
    a = run(spec, defaults, MaxWeight(), 10_000, 500, seed=2, checkpoints=(), block_size=1024)
    b = run(spec, defaults, MaxWeight(), 10_000, 500, seed=2, checkpoints=(), block_size=333)
    assert np.array_equal(a.packets_arrived, b.packets_arrived)
    assert np.array_equal(a.sum_q, b.sum_q)
    assert np.array_equal(a.sum_delay, b.sum_delay)
    assert a.cycles == b.cycles


def test_run_seeds_differ(parallel2, light_pair):
    a = run(parallel2, light_pair, MaxWeight(), 10_000, 500, seed=1, checkpoints=())
    b = run(parallel2, light_pair, MaxWeight(), 10_000, 500, seed=2, checkpoints=())
    assert not np.array_equal(a.sum_q, b.sum_q)


def test_run_conservation_and_window(parallel2, light_pair):
    st = run(parallel2, light_pair, MaxWeight(), 50_000, 2000, seed=0, checkpoints=(10_000, 50_000))
    assert st.slots == 48_000
    assert np.array_equal(st.packets_arrived, st.packets_served + st.final_q)
    assert [c.slot for c in st.checkpoints] == [10_000, 50_000]
    assert st.file_arrivals.sum() > 0
    assert st.hist_q[0].sum() == st.slots


def test_run_zero_warmup_counts_every_slot(parallel2, light_pair):
    st = run(parallel2, light_pair, MaxWeight(), 5000, 0, seed=0, checkpoints=())
    assert st.slots == 5000


def test_run_stable_parallel_little_law(parallel2, light_pair):
    st = run(parallel2, light_pair, MaxWeight(), 200_000, 10_000, seed=3, checkpoints=())
    for f in range(2):
        assert littles_law_residual(st, f) < 0.05
    assert st.cycles > 0
    assert st.mean_cycle_len() > 1.0


def test_run_collect_cycle_starts_on_epoch(parallel2, light_pair):
    st = run(parallel2, light_pair, MaxWeight(), 20_000, 1000, seed=0, checkpoints=(), collect="cycle")
    assert 0 < st.slots <= 19_000
    # 窓の最初のスロットは全キューが空
    assert all(h[0] > 0 for h in st.hist_q)


def test_run_collect_cycle_without_epoch_uses_warmup_window(parallel2, caplog):
    overloaded = (arr.ArrivalSpec(1.0, arr.Constant(2)), arr.bernoulli(0.1))
    st = run(parallel2, overloaded, MaxWeight(), 5000, 1000, seed=3, checkpoints=(2000, 5000), collect="cycle")
    assert "No regeneration epoch" in caplog.text
    assert st.slots == 4000
    assert st.mean_q()[0] > 1000
    assert [cp.slot for cp in st.checkpoints] == [2000, 5000]
    ref = run(parallel2, overloaded, MaxWeight(), 5000, 1000, seed=3, checkpoints=(2000, 5000))
    assert st.sum_q.tolist() == ref.sum_q.tolist()


def test_run_alpha_exponent_tracked(fig1):
    spec, defaults = fig1
    st = run(spec, defaults, MaxWeightAlpha((0.4, 1.0)), 5000, 500, seed=0, checkpoints=())
    assert 0.4 in st.exponents and 1.0 in st.exponents
    assert st.mean_q_pow(1.0) == pytest.approx(st.mean_q())


def test_run_wasted_slots_zero_for_parallel_mw(parallel2, light_pair):
    # 並列キューの MW は非空キューを必ず選ぶ
    st = run(parallel2, light_pair, MaxWeight(), 10_000, 100, seed=0, checkpoints=())
    assert st.wasted_slots == 0


@pytest.mark.parametrize("horizon,warmup", [(0, None), (100, 100), (100, 200), (100, -1)])
def test_run_invalid_horizon(parallel2, light_pair, horizon, warmup):
    with pytest.raises(InvalidHorizon):
        run(parallel2, light_pair, MaxWeight(), horizon, warmup)


def test_run_arrival_count_mismatch(parallel2):
    with pytest.raises(InvalidArrivalSpec):
        run(parallel2, (arr.bernoulli(0.2),), MaxWeight(), 1000, 10)


@pytest.mark.parametrize("T,expected", [(10 ** 7, 10 ** 5), (10 ** 6, 10 ** 4), (20_000, 10 ** 4), (5000, 500)])
def test_default_warmup(T, expected):
    assert default_warmup(T) == expected


def test_run_packed_matches_run(parallel2, light_pair):
    kwargs = dict(network=parallel2, arrivals=light_pair, policy=MaxWeight(), horizon=5000, warmup=100,
                  seed=4, checkpoints=())
    st = codec.unpack_stats(run_packed(kwargs))
    assert np.array_equal(st.sum_q, run(**kwargs).sum_q)


def test_fig1_conservation_with_heavy_flow():
    spec, defaults = preset("fig1")
    st = run(spec, defaults, MaxWeight(), 100_000, 1000, seed=0, checkpoints=(10_000, 100_000))
    assert st.packets_arrived[0] > 0
    assert np.array_equal(st.packets_arrived, st.packets_served + st.final_q)
