"""
stats.py

シミュレーション統計の集計・結合・検定モジュール。
- SimStats: フローごとのキュー長モーメント、打ち切り平均、ファイル遅延、
  系内ファイル数、時間定常/到着時点ヒストグラム、チェックポイント、再生サイクル
- merge: 独立レプリケーションの結合（結合則・交換則を満たす）
- Little の法則残差、BASTA 距離、発散診断
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from core.netsched.errors import (
    ConfigMismatch,
    EmptyHistogram,
    FlowIdOutOfRange,
    NoCompletedFiles,
    TooFewCheckpoints,
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

TRUNCATION_LADDER: Tuple[int, ...] = (10, 100, 1000, 10_000, 100_000)
EXPONENT_LADDER: Tuple[float, ...] = (0.4, 0.5, 1.0, 2.0)
# ヒストグラム上限（超過分は最後のビンに集約）
HISTOGRAM_CAP = 10 ** 6
LITTLE_EPS = 1e-9

# 発散診断のしきい値
DIVERGE_RATIO = 1.5
DIVERGE_TOTAL = 4.0
CONVERGE_TOL = 0.1


class Checkpoint(NamedTuple):
    tag: int
    slot: int
    means: Tuple[float, ...]


class Trend(str, Enum):
    CONVERGING = "Converging"
    DIVERGING = "Diverging"
    INCONCLUSIVE = "Inconclusive"


class Diagnostic(NamedTuple):
    trend: Trend
    ratios: Tuple[float, ...]
    slots: Tuple[int, ...]


def config_fingerprint(payload: Dict) -> str:
    """設定内容（シード・ホライズンを除く）の SHA-256。"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class SimStats:
    fingerprint: str
    num_flows: int
    exponents: Tuple[float, ...] = EXPONENT_LADDER
    truncations: Tuple[int, ...] = TRUNCATION_LADDER
    slots: int = 0
    sum_q: np.ndarray = None
    sum_q_pow: np.ndarray = None          # (len(exponents), F)
    trunc_q: np.ndarray = None            # (len(truncations), F)
    sum_files: np.ndarray = None          # Σ L_f(t)
    file_arrivals: np.ndarray = None
    files_completed: np.ndarray = None
    sum_delay: np.ndarray = None
    trunc_delay: np.ndarray = None        # (len(truncations), F)
    hist_q: List[np.ndarray] = None
    hist_arrival: List[np.ndarray] = None
    checkpoints: List[Checkpoint] = field(default_factory=list)
    cycles: int = 0
    sum_cycle_len: int = 0
    sum_cycle_len_sq: int = 0
    packets_arrived: np.ndarray = None
    packets_served: np.ndarray = None
    final_q: np.ndarray = None
    wasted_slots: int = 0

    def __post_init__(self):
        F, E, M = self.num_flows, len(self.exponents), len(self.truncations)
        ints = lambda *shape: np.zeros(shape, dtype=np.int64)
        for name, default in (
            ("sum_q", ints(F)), ("sum_q_pow", np.zeros((E, F))), ("trunc_q", ints(M, F)),
            ("sum_files", ints(F)), ("file_arrivals", ints(F)), ("files_completed", ints(F)),
            ("sum_delay", ints(F)), ("trunc_delay", ints(M, F)),
            ("packets_arrived", ints(F)), ("packets_served", ints(F)), ("final_q", ints(F)),
        ):
            if getattr(self, name) is None:
                setattr(self, name, default)
        if self.hist_q is None:
            self.hist_q = [ints(0) for _ in range(F)]
        if self.hist_arrival is None:
            self.hist_arrival = [ints(0) for _ in range(F)]

    @classmethod
    def empty(cls, like: "SimStats") -> "SimStats":
        return cls(like.fingerprint, like.num_flows, like.exponents, like.truncations)

    def exponent_index(self, alpha: float) -> int:
        for i, e in enumerate(self.exponents):
            if abs(e - alpha) < 1e-12:
                return i
        raise KeyError(f"exponent {alpha} not tracked; ladder is {self.exponents}")

    # -- 平均値 -----------------------------------------------------------

    def _check_flow(self, f: int) -> None:
        if not 0 <= f < self.num_flows:
            raise FlowIdOutOfRange(f, self.num_flows)

    def mean_q(self) -> np.ndarray:
        return self.sum_q / max(self.slots, 1)

    def mean_q_pow(self, alpha: float) -> np.ndarray:
        return self.sum_q_pow[self.exponent_index(alpha)] / max(self.slots, 1)

    def mean_files(self) -> np.ndarray:
        return self.sum_files / max(self.slots, 1)

    def p_hat(self) -> np.ndarray:
        return self.file_arrivals / max(self.slots, 1)

    def mean_delay(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.files_completed > 0, self.sum_delay / np.maximum(self.files_completed, 1), np.nan)

    def mean_cycle_len(self) -> float:
        return self.sum_cycle_len / self.cycles if self.cycles else float("nan")


def _pad_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = max(a.size, b.size)
    out = np.zeros(n, dtype=np.int64)
    out[:a.size] += a
    out[:b.size] += b
    return out


def merge(a: SimStats, b: SimStats) -> SimStats:
    """
    2 つの統計を結合します（累積量の和、チェックポイントは連結してタグ順に整列）。

    Raises:
        ConfigMismatch: 設定フィンガープリントやラダーが一致しない場合
    """
    if (a.fingerprint, a.num_flows, a.exponents, a.truncations) != \
            (b.fingerprint, b.num_flows, b.exponents, b.truncations):
        logger.error("Refusing to merge stats %s and %s", a.fingerprint, b.fingerprint)
        raise ConfigMismatch(f"cannot merge stats with fingerprints {a.fingerprint} and {b.fingerprint}")
    return replace(
        a,
        slots=a.slots + b.slots,
        sum_q=a.sum_q + b.sum_q,
        sum_q_pow=a.sum_q_pow + b.sum_q_pow,
        trunc_q=a.trunc_q + b.trunc_q,
        sum_files=a.sum_files + b.sum_files,
        file_arrivals=a.file_arrivals + b.file_arrivals,
        files_completed=a.files_completed + b.files_completed,
        sum_delay=a.sum_delay + b.sum_delay,
        trunc_delay=a.trunc_delay + b.trunc_delay,
        hist_q=[_pad_add(x, y) for x, y in zip(a.hist_q, b.hist_q)],
        hist_arrival=[_pad_add(x, y) for x, y in zip(a.hist_arrival, b.hist_arrival)],
        checkpoints=sorted(a.checkpoints + b.checkpoints),
        cycles=a.cycles + b.cycles,
        sum_cycle_len=a.sum_cycle_len + b.sum_cycle_len,
        sum_cycle_len_sq=a.sum_cycle_len_sq + b.sum_cycle_len_sq,
        packets_arrived=a.packets_arrived + b.packets_arrived,
        packets_served=a.packets_served + b.packets_served,
        final_q=a.final_q + b.final_q,
        wasted_slots=a.wasted_slots + b.wasted_slots,
    )


def merge_all(items: Sequence[SimStats]) -> SimStats:
    if not items:
        raise ValueError("nothing to merge")
    out = items[0]
    for s in items[1:]:
        out = merge(out, s)
    return out


# ---------------------------------------------------------------- checks

def littles_law_residual(stats: SimStats, f: int) -> float:
    """|L̄_f − p̂_f D̄_f| / max(L̄_f, ε)。"""
    stats._check_flow(f)
    if stats.files_completed[f] == 0:
        logger.error("No completed files on flow %d; Little's law residual undefined", f)
        raise NoCompletedFiles(f"flow {f} has no completed files")
    T = stats.slots
    L = stats.sum_files[f] / T
    p = stats.file_arrivals[f] / T
    D = stats.sum_delay[f] / stats.files_completed[f]
    return float(abs(L - p * D) / max(L, LITTLE_EPS))


def basta_distance(stats: SimStats, f: int) -> float:
    """時間定常分布と到着時点分布の経験 CDF の sup 距離。"""
    stats._check_flow(f)
    a, b = stats.hist_q[f], stats.hist_arrival[f]
    if a.sum() == 0 or b.sum() == 0:
        logger.error("Empty histogram on flow %d (time=%d, arrivals=%d)", f, a.sum(), b.sum())
        raise EmptyHistogram(f"flow {f} has an empty queue-length histogram")
    n = max(a.size, b.size)
    ca = np.cumsum(np.pad(a, (0, n - a.size))) / a.sum()
    cb = np.cumsum(np.pad(b, (0, n - b.size))) / b.sum()
    return float(np.abs(ca - cb).max())


def checkpoint_means(stats: SimStats, f: int) -> Tuple[Tuple[int, ...], Tuple[float, ...]]:
    """スロットごとにレプリケーション平均したチェックポイント値。"""
    stats._check_flow(f)
    by_slot: Dict[int, List[float]] = {}
    for cp in stats.checkpoints:
        by_slot.setdefault(cp.slot, []).append(cp.means[f])
    slots = tuple(sorted(by_slot))
    return slots, tuple(float(np.mean(by_slot[s])) for s in slots)


def _ratio(prev: float, nxt: float) -> float:
    if prev == 0.0:
        return 1.0 if nxt == 0.0 else float("inf")
    return nxt / prev


def block_means(slots: Sequence[int], means: Sequence[float]) -> Tuple[float, ...]:
    """slot 0 からの実行平均を、チェックポイント間 (c_{i-1}, c_i] の区間平均に直します。"""
    out = []
    prev_slot, prev_total = 0, 0.0
    for s, m in zip(slots, means):
        total = s * m
        out.append(max(0.0, (total - prev_total) / (s - prev_slot)))
        prev_slot, prev_total = s, total
    return tuple(out)


def divergence_diagnostic(stats: SimStats, f: int, basis: str = "block") -> Diagnostic:
    """
    チェックポイントごとの Q̄_f の比 r_i から発散傾向を判定します。

    basis="block": 区間 (c_{i-1}, c_i] の平均を比べる（既定）
    basis="running": slot 0 からの実行平均をそのまま比べる
    Diverging: すべての r_i >= 1.5 かつ 最終/最初 >= 4
    Converging: すべての |r_i - 1| <= 0.1
    それ以外: Inconclusive
    """
    if basis not in ("block", "running"):
        raise ValueError(f"basis must be 'block' or 'running', got {basis!r}")
    slots, means = checkpoint_means(stats, f)
    if len(slots) < 3:
        logger.error("Divergence diagnostic needs >= 3 checkpoints, got %d", len(slots))
        raise TooFewCheckpoints(f"need at least 3 checkpoints, got {len(slots)}")
    if basis == "block":
        means = block_means(slots, means)
    ratios = tuple(_ratio(means[i], means[i + 1]) for i in range(len(means) - 1))
    total = _ratio(means[0], means[-1])
    if all(r >= DIVERGE_RATIO for r in ratios) and total >= DIVERGE_TOTAL:
        trend = Trend.DIVERGING
    elif all(abs(r - 1.0) <= CONVERGE_TOL for r in ratios):
        trend = Trend.CONVERGING
    else:
        trend = Trend.INCONCLUSIVE
    return Diagnostic(trend, ratios, slots)


def truncated_means(stats: SimStats, f: int) -> Dict[int, Tuple[float, float]]:
    """M -> (E[min(Q_f, M)], E[min(D_f, M)])。"""
    stats._check_flow(f)
    T = max(stats.slots, 1)
    n = stats.files_completed[f]
    out = {}
    for i, M in enumerate(stats.truncations):
        d = stats.trunc_delay[i, f] / n if n else float("nan")
        out[M] = (float(stats.trunc_q[i, f] / T), float(d))
    return out


def summary_row(stats: SimStats, f: int, alpha: float = 1.0) -> Dict[str, float]:
    """
    フロー f の集計値を CSV 1 行分の辞書にします（列順は固定）。

    Little 残差・BASTA 距離が定義できない場合は NaN。
    """
    stats._check_flow(f)
    row: Dict[str, float] = {
        "T": stats.slots,
        "mean_q": float(stats.mean_q()[f]),
        "mean_q_alpha": float(stats.mean_q_pow(alpha)[f]),
    }
    trunc = truncated_means(stats, f)
    for M, (q, _) in trunc.items():
        row[f"trunc_q_M{M}"] = q
    row["files"] = int(stats.files_completed[f])
    row["mean_delay"] = float(stats.mean_delay()[f])
    for M, (_, d) in trunc.items():
        row[f"trunc_delay_M{M}"] = d
    row["mean_L"] = float(stats.mean_files()[f])
    row["p_hat"] = float(stats.p_hat()[f])
    try:
        row["littles_residual"] = littles_law_residual(stats, f)
    except NoCompletedFiles:
        row["littles_residual"] = float("nan")
    try:
        row["basta_dist"] = basta_distance(stats, f)
    except EmptyHistogram:
        row["basta_dist"] = float("nan")
    slots, means = checkpoint_means(stats, f)
    for s, m in zip(slots, means):
        row[f"ckpt_{s}"] = m
    row["cycles"] = stats.cycles
    row["mean_cycle_len"] = stats.mean_cycle_len()
    return row


def check_conservation(stats: SimStats) -> None:
    """到着パケット数 = サービス済み + 最終キュー長 を検証します。"""
    bad = np.flatnonzero(stats.packets_arrived != stats.packets_served + stats.final_q)
    if bad.size:
        raise RuntimeError(f"packet conservation violated on flows {bad.tolist()}")
