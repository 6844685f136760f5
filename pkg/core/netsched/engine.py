"""
engine.py

離散時間スロットシミュレーションエンジン。
- スロット t 内の順序: Q(t) 観測 → スケジュール決定 → サービス → 退去記録 → 到着追加
- フロー内は FCFS、ファイル遅延 D = 退去スロット − 到着スロット（>= 1）
- 到着はブロック単位でベクトル化抽選し、統計もブロック単位で集計
- 全キューが空のスロット開始を再生時点として記録
- run() は (入力, seed) の純関数
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.netsched import arrivals as arr
from core.netsched import codec
from core.netsched.errors import InvalidArrivalSpec, InvalidHorizon
from core.netsched.model import NetworkSpec, network_to_dict
from core.netsched.scheduling import PolicySpec, ScheduleDecision, make_decider, policy_to_dict
from core.netsched.stats import (
    EXPONENT_LADDER,
    HISTOGRAM_CAP,
    TRUNCATION_LADDER,
    Checkpoint,
    SimStats,
    check_conservation,
    config_fingerprint,
)


def _get_logger() -> logging.Logger:
    logger = logging.getLogger(__name__)
    if not logger.hasHandlers():
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('[%(levelname)s] %(name)s: %(message)s'))
        logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return logger

logger = _get_logger()

CHECKPOINT_SLOTS: Tuple[int, ...] = (10 ** 4, 10 ** 5, 10 ** 6, 10 ** 7)
BLOCK_SIZE = 1 << 16
MIN_WARMUP = 10 ** 4
# スケジューラ用ストリームは [seed, 0]、フロー f のファイル発生は [seed, FLOW_STREAM_OFFSET + f, 0]、
# サイズは [seed, FLOW_STREAM_OFFSET + f, 1]
FLOW_STREAM_OFFSET = 1


@dataclass(slots=True)
class FileRecord:
    flow: int
    arrival_slot: int
    size: int
    remaining: int
    departure_slot: Optional[int] = None

    @property
    def delay(self) -> Optional[int]:
        if self.departure_slot is None:
            return None
        return self.departure_slot - self.arrival_slot


@dataclass
class SimState:
    num_flows: int
    slot: int = 0
    q: np.ndarray = None
    files: List[Deque[FileRecord]] = None
    arrived: List[int] = None
    served: List[int] = None
    departed: List[FileRecord] = field(default_factory=list)
    served_last: int = 0

    def __post_init__(self):
        F = self.num_flows
        if self.q is None:
            self.q = np.zeros(F, dtype=np.int64)
        if self.files is None:
            self.files = [deque() for _ in range(F)]
        if self.arrived is None:
            self.arrived = [0] * F
        if self.served is None:
            self.served = [0] * F

    def recount(self) -> np.ndarray:
        """ファイルリストから再計算したキュー長。"""
        return np.array([sum(rec.remaining for rec in d) for d in self.files], dtype=np.int64)


def step(state: SimState, decision: ScheduleDecision, arrivals: Sequence[int]) -> SimState:
    """
    1 スロット進めます（状態はその場で更新して返却）。

    Q_f(t+1) = Q_f(t) + A_f(t) − S_f(t)·1{Q_f(t) > 0}
    サービスは先頭ファイルから 1 パケット、空になったファイルは departure_slot = t。
    到着はスロット末尾で、新しいファイルとして末尾に追加。
    """
    t = state.slot
    q = state.q
    departed: List[FileRecord] = []
    served = 0
    for f in decision.chosen.members:
        if q[f] > 0:
            head = state.files[f][0]
            head.remaining -= 1
            q[f] -= 1
            state.served[f] += 1
            served += 1
            if head.remaining == 0:
                head.departure_slot = t
                state.files[f].popleft()
                departed.append(head)
    for f, b in enumerate(arrivals):
        if b:
            b = int(b)
            state.files[f].append(FileRecord(f, t, b, b))
            q[f] += b
            state.arrived[f] += b
    state.departed = departed
    state.served_last = served
    state.slot = t + 1
    return state


def default_warmup(horizon: int) -> int:
    """max(10^4, T/100)。ただし T 以上になる場合は T/10。"""
    w = max(MIN_WARMUP, horizon // 100)
    return w if w < horizon else horizon // 10


def stats_fingerprint(network: NetworkSpec, arrivals: Sequence[arr.ArrivalSpec], policy: PolicySpec,
                      exponents: Sequence[float], truncations: Sequence[int]) -> str:
    return config_fingerprint({
        "network": network_to_dict(network),
        "arrivals": [arr.arrival_to_dict(a) for a in arrivals],
        "policy": policy_to_dict(policy),
        "exponents": list(exponents),
        "truncations": list(truncations),
        "histogram_cap": HISTOGRAM_CAP,
    })


class _Collector:
    """ブロック単位でスロット記録を SimStats に畳み込む。"""

    def __init__(self, stats: SimStats, warmup: int, collect: str, tag: int):
        self.stats = stats
        self.warmup = warmup
        self.cycle_mode = collect == "cycle"
        self.window_start: Optional[int] = None if self.cycle_mode else warmup
        self.total_q = np.zeros(stats.num_flows, dtype=np.int64)
        self.last_epoch: Optional[int] = None
        self.tag = tag
        self._exps = np.asarray(stats.exponents, dtype=float)

    def absorb(self, start: int, q_rec: np.ndarray, l_rec: np.ndarray, a_rec: np.ndarray,
               served_rec: np.ndarray, departures: List[FileRecord]) -> None:
        st = self.stats
        n = q_rec.shape[0]
        self.total_q += q_rec.sum(axis=0)
        busy = q_rec.any(axis=1)
        st.wasted_slots += int(((served_rec == 0) & busy).sum())

        if self.window_start is None:
            idle = np.flatnonzero(~busy & (np.arange(start, start + n) >= self.warmup))
            if idle.size == 0:
                return
            self.window_start = start + int(idle[0])
            logger.debug("Cycle-based collection starts at slot %d", self.window_start)
        lo = max(0, self.window_start - start)
        if lo >= n:
            return

        Q = q_rec[lo:]
        A = a_rec[lo:]
        st.slots += Q.shape[0]
        st.sum_q += Q.sum(axis=0)
        Qf = Q.astype(float)
        for i, e in enumerate(self._exps):
            st.sum_q_pow[i] += np.power(Qf, e).sum(axis=0)
        for i, M in enumerate(st.truncations):
            st.trunc_q[i] += np.minimum(Q, M).sum(axis=0)
        st.sum_files += l_rec[lo:].sum(axis=0)
        hit = A > 0
        st.file_arrivals += hit.sum(axis=0)
        capped = np.minimum(Q, HISTOGRAM_CAP + 1)
        for f in range(st.num_flows):
            st.hist_q[f] = _hist_add(st.hist_q[f], capped[:, f])
            st.hist_arrival[f] = _hist_add(st.hist_arrival[f], capped[hit[:, f], f])

        first = start + lo
        for rec in departures:
            if rec.departure_slot >= first:
                d = rec.departure_slot - rec.arrival_slot
                f = rec.flow
                st.files_completed[f] += 1
                st.sum_delay[f] += d
                for i, M in enumerate(st.truncations):
                    st.trunc_delay[i, f] += min(d, M)

        epochs = first + np.flatnonzero(~busy[lo:])
        if epochs.size:
            if self.last_epoch is not None:
                epochs = np.concatenate(([self.last_epoch], epochs))
            lengths = np.diff(epochs)
            st.cycles += int(lengths.size)
            st.sum_cycle_len += int(lengths.sum())
            st.sum_cycle_len_sq += int((lengths * lengths).sum())
            self.last_epoch = int(epochs[-1])

    def checkpoint(self, slot: int) -> None:
        means = tuple(float(x) for x in self.total_q / slot)
        self.stats.checkpoints.append(Checkpoint(self.tag, slot, means))


def _hist_add(hist: np.ndarray, values: np.ndarray) -> np.ndarray:
    if values.size == 0:
        return hist
    counts = np.bincount(values)
    if counts.size > hist.size:
        counts[:hist.size] += hist
        return counts
    hist = hist.copy()
    hist[:counts.size] += counts
    return hist


def _boundaries(horizon: int, block_size: int, checkpoints: Sequence[int]) -> List[int]:
    marks = set(range(block_size, horizon, block_size))
    marks.update(c for c in checkpoints if 0 < c < horizon)
    marks.add(horizon)
    return sorted(marks)


def run(network: NetworkSpec, arrivals: Sequence[arr.ArrivalSpec], policy: PolicySpec,
        horizon: int, warmup: Optional[int] = None, seed: int = 0, *,
        checkpoints: Sequence[int] = CHECKPOINT_SLOTS,
        exponents: Optional[Sequence[float]] = None,
        truncations: Sequence[int] = TRUNCATION_LADDER,
        collect: str = "warmup",
        block_size: int = BLOCK_SIZE) -> SimStats:
    """
    ネットワークを horizon スロット分シミュレーションし、統計を返します。

    Args:
        network: 検証済み NetworkSpec
        arrivals: フローごとの到着仕様
        policy: スケジューリングポリシー
        horizon: 総スロット数 T
        warmup: 統計から除外する先頭スロット数 W（省略時 default_warmup(T)）
        seed: 64 ビット乱数シード
        checkpoints: 実行平均を記録するスロット（slot 0 からの平均）
        exponents: Σ Q^α を集計する指数（ポリシーの α は自動で追加）
        truncations: E[min(Q, M)], E[min(D, M)] の M
        collect: "warmup"（固定ウォームアップ）または "cycle"（W 以降の最初の再生時点から）
                 W 以降に再生時点がなければ警告を出して固定ウォームアップの窓で集計

    Raises:
        InvalidHorizon: T <= W、または負の値
        InvalidArrivalSpec: 到着仕様の数がフロー数と異なる場合
    """
    F = network.num_flows
    if not isinstance(horizon, (int, np.integer)) or horizon <= 0:
        logger.error("horizon must be a positive integer, got %r", horizon)
        raise InvalidHorizon(f"horizon must be a positive integer, got {horizon!r}")
    if warmup is None:
        warmup = default_warmup(horizon)
    if warmup < 0 or warmup >= horizon:
        logger.error("Need 0 <= warmup < horizon, got warmup=%d horizon=%d", warmup, horizon)
        raise InvalidHorizon(f"need 0 <= warmup < horizon, got W={warmup}, T={horizon}")
    if len(arrivals) != F:
        logger.error("Got %d arrival specs for %d flows", len(arrivals), F)
        raise InvalidArrivalSpec(f"expected {F} arrival specs, got {len(arrivals)}")
    if collect not in ("warmup", "cycle"):
        raise ValueError(f"collect must be 'warmup' or 'cycle', got {collect!r}")

    alphas = policy.alphas_for(F)
    ladder = tuple(sorted(set(EXPONENT_LADDER if exponents is None else exponents) | set(alphas)))
    truncations = tuple(truncations)
    stats = SimStats(stats_fingerprint(network, arrivals, policy, ladder, truncations), F, ladder, truncations)

    decider = make_decider(policy, network)
    decisions = [ScheduleDecision.of(s, F) for s in network.schedules]
    sched_rng = np.random.default_rng([seed, 0])
    flow_rngs = [np.random.default_rng([seed, FLOW_STREAM_OFFSET + f, 0]) for f in range(F)]
    size_rngs = [np.random.default_rng([seed, FLOW_STREAM_OFFSET + f, 1]) for f in range(F)]
    state = SimState(F)
    collector = _Collector(stats, warmup, collect, tag=seed)
    # cycle モードでは W からの固定窓も並行して集計（再生時点がなければこちらを返す）
    fallback = None
    if collector.cycle_mode:
        fallback = _Collector(SimStats.empty(stats), warmup, "warmup", tag=seed)
    checkpoint_set = set(checkpoints)

    logger.info("Simulating %s for %d slots (warmup=%d, seed=%d, policy=%s)",
                network.name, horizon, warmup, seed, policy.kind)
    start = 0
    for end in _boundaries(horizon, block_size, checkpoints):
        n = end - start
        a_rec = np.column_stack([arr.sample_block(a, rng, n, srng)
                                 for a, rng, srng in zip(arrivals, flow_rngs, size_rngs)])
        rows = a_rec.tolist()
        q_rec = np.empty((n, F), dtype=np.int64)
        l_rec = np.empty((n, F), dtype=np.int64)
        served_rec = np.empty(n, dtype=np.int64)
        departures: List[FileRecord] = []
        files, q = state.files, state.q
        for i in range(n):
            q_rec[i] = q
            l_rec[i] = [len(d) for d in files]
            step(state, decisions[decider(q, sched_rng)], rows[i])
            served_rec[i] = state.served_last
            if state.departed:
                departures.extend(state.departed)
        collector.absorb(start, q_rec, l_rec, a_rec, served_rec, departures)
        if fallback is not None:
            if collector.window_start is None:
                fallback.absorb(start, q_rec, l_rec, a_rec, served_rec, departures)
            else:
                fallback = None
        if end in checkpoint_set:
            if not np.array_equal(state.recount(), state.q):
                raise RuntimeError(f"queue counters diverged from file lists at slot {end}")
            collector.checkpoint(end)
        start = end

    if fallback is not None and collector.window_start is None:
        logger.warning("No regeneration epoch after slot %d (seed=%d); collecting from the warm-up instead",
                       warmup, seed)
        fallback.stats.checkpoints = stats.checkpoints
        stats = fallback.stats

    stats.packets_arrived = np.asarray(state.arrived, dtype=np.int64)
    stats.packets_served = np.asarray(state.served, dtype=np.int64)
    stats.final_q = state.q.copy()
    check_conservation(stats)
    logger.info("Finished %s seed=%d: mean Q=%s, cycles=%d",
                network.name, seed, np.round(stats.mean_q(), 3).tolist(), stats.cycles)
    return stats


def run_packed(kwargs: Dict) -> bytes:
    """プロセスプール用エントリポイント。run() の結果をフレーム化して返します。"""
    return codec.pack_stats(run(**kwargs))
