"""
scheduling.py

スケジューリングポリシーモジュール。
- Max-Weight: Σ Q_f s_f を最大化するスケジュールを選択
- Max-Weight-α: Σ Q_f^{α_f} s_f を最大化（α ≡ 1 は Max-Weight と同一動作）
- Priority: 優先順位に沿った辞書式サービスベクトルを最大化する比較用ベースライン
- 最大値が複数ある場合は一様ランダムに選択
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.netsched.errors import InvalidPolicy
from core.netsched.model import NetworkSpec, Schedule


def _get_logger() -> logging.Logger:
    logger = logging.getLogger(__name__)
    if not logger.hasHandlers():
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('[%(levelname)s] %(name)s: %(message)s'))
        logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return logger

logger = _get_logger()

# 小数 α のときのタイ判定の相対許容誤差
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class MaxWeight:
    kind = "max_weight"

    def alphas_for(self, num_flows: int) -> Tuple[float, ...]:
        return (1.0,) * num_flows


@dataclass(frozen=True)
class MaxWeightAlpha:
    alphas: Tuple[float, ...]
    kind = "max_weight_alpha"

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.alphas or any(not a > 0 for a in self.alphas):
            logger.error("Max-Weight-alpha requires positive exponents, got %r", self.alphas)
            raise InvalidPolicy(f"alphas must all be positive, got {self.alphas!r}")

    def alphas_for(self, num_flows: int) -> Tuple[float, ...]:
        if len(self.alphas) != num_flows:
            logger.error("Got %d alphas for %d flows", len(self.alphas), num_flows)
            raise InvalidPolicy(f"expected {num_flows} alphas, got {len(self.alphas)}")
        return self.alphas

    @property
    def is_unit(self) -> bool:
        return all(a == 1.0 for a in self.alphas)


@dataclass(frozen=True)
class Priority:
    order: Tuple[int, ...]
    kind = "priority"

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(f) for f in self.order))

    def alphas_for(self, num_flows: int) -> Tuple[float, ...]:
        return (1.0,) * num_flows


PolicySpec = Union[MaxWeight, MaxWeightAlpha, Priority]


@dataclass(frozen=True)
class ScheduleDecision:
    chosen: Schedule
    service: Tuple[int, ...]

    @classmethod
    def of(cls, schedule: Schedule, num_flows: int) -> "ScheduleDecision":
        service = [0] * num_flows
        for f in schedule.members:
            service[f] = 1
        return cls(schedule, tuple(service))


def behaves_as_max_weight(policy: PolicySpec) -> bool:
    return isinstance(policy, MaxWeight) or (isinstance(policy, MaxWeightAlpha) and policy.is_unit)


def weight(Q: Sequence[int], s: Schedule, alphas: Optional[Sequence[float]] = None) -> Union[int, float]:
    """Σ_{f∈s} Q_f^{α_f}。α 省略時（または全て 1）は整数で厳密に計算します。"""
    if alphas is None or all(alphas[f] == 1.0 for f in s.members):
        return int(sum(int(Q[f]) for f in s.members))
    return float(sum(float(Q[f]) ** alphas[f] for f in s.members))


def _pick(candidates: np.ndarray, rng: np.random.Generator) -> int:
    if candidates.size == 1:
        return int(candidates[0])
    return int(candidates[rng.integers(candidates.size)])


class _MaxWeightDecider:
    def __init__(self, spec: NetworkSpec):
        self._incidence = spec.incidence

    def __call__(self, q: np.ndarray, rng: np.random.Generator) -> int:
        w = self._incidence @ q
        return _pick(np.flatnonzero(w == w.max()), rng)


class _AlphaDecider:
    def __init__(self, spec: NetworkSpec, alphas: Tuple[float, ...]):
        self._incidence = spec.incidence.astype(float)
        self._alphas = np.asarray(alphas, dtype=float)

    def __call__(self, q: np.ndarray, rng: np.random.Generator) -> int:
        w = self._incidence @ np.power(q.astype(float), self._alphas)
        top = w.max()
        return _pick(np.flatnonzero(w >= top - TIE_RTOL * top), rng)


class _PriorityDecider:
    """
    非空フローのみを対象に、優先順位の高いフローほど大きいビットを割り当て、
    その和（= 辞書式サービスベクトル）を最大化するスケジュールを選ぶ。
    """

    def __init__(self, spec: NetworkSpec, order: Tuple[int, ...]):
        F = spec.num_flows
        if sorted(order) != list(range(F)):
            logger.error("Priority order %r is not a permutation of %d flows", order, F)
            raise InvalidPolicy(f"priority order must be a permutation of range({F})")
        rank = np.zeros(F, dtype=np.uint64)
        for pos, f in enumerate(order):
            rank[f] = np.uint64(1) << np.uint64(F - 1 - pos)
        self._rank = rank
        self._incidence = spec.incidence.astype(np.uint64)

    def __call__(self, q: np.ndarray, rng: np.random.Generator) -> int:
        w = self._incidence @ np.where(q > 0, self._rank, np.uint64(0))
        return _pick(np.flatnonzero(w == w.max()), rng)


Decider = Callable[[np.ndarray, np.random.Generator], int]


def make_decider(policy: PolicySpec, spec: NetworkSpec) -> Decider:
    """(Q, rng) -> スケジュール番号 を返す呼び出し可能オブジェクトを作ります。"""
    if isinstance(policy, MaxWeight):
        return _MaxWeightDecider(spec)
    if isinstance(policy, MaxWeightAlpha):
        alphas = policy.alphas_for(spec.num_flows)
        if policy.is_unit:
            return _MaxWeightDecider(spec)
        return _AlphaDecider(spec, alphas)
    if isinstance(policy, Priority):
        return _PriorityDecider(spec, policy.order)
    raise InvalidPolicy(f"unknown policy: {policy!r}")


def decide(policy: PolicySpec, Q: Sequence[int], spec: NetworkSpec,
           rng: Optional[np.random.Generator] = None) -> ScheduleDecision:
    """
    キュー長ベクトル Q に対してポリシーが選ぶスケジュールを返します。

    Args:
        policy: MaxWeight / MaxWeightAlpha / Priority
        Q: 非負整数のキュー長
        spec: 検証済み NetworkSpec
        rng: タイブレーク用乱数（省略時は新規生成）
    """
    if rng is None:
        rng = np.random.default_rng()
    q = np.asarray(Q, dtype=np.int64)
    if q.shape != (spec.num_flows,) or (q < 0).any():
        logger.error("Queue vector %r does not match %d flows", Q, spec.num_flows)
        raise ValueError("Q must be a non-negative vector with one entry per flow")
    idx = make_decider(policy, spec)(q, rng)
    return ScheduleDecision.of(spec.schedules[idx], spec.num_flows)


# ---------------------------------------------------------------- JSON

_KIND_ALIASES = {"maxweight": "max_weight", "mw": "max_weight", "mwalpha": "max_weight_alpha",
                 "mw_alpha": "max_weight_alpha"}


def policy_kind(obj: Mapping) -> str:
    """別名を正規化したポリシー種別。"""
    kind = str(obj.get("kind", "max_weight")).lower()
    return _KIND_ALIASES.get(kind, kind)


def load_policy(obj: Mapping) -> PolicySpec:
    """{"kind": "max_weight"|"max_weight_alpha"|"priority", "alphas": [...], "order": [...]}。"""
    kind = policy_kind(obj)
    if kind not in ("max_weight", "max_weight_alpha", "priority"):
        logger.error("Unknown policy kind: %s", kind)
        raise InvalidPolicy(f"unknown policy kind: {kind!r}")
    stray = [key for key, owner in (("alphas", "max_weight_alpha"), ("order", "priority"))
             if obj.get(key) is not None and kind != owner]
    if stray:
        logger.error("Policy %s does not take %s", kind, ", ".join(stray))
        raise InvalidPolicy(f"policy {kind!r} does not accept {', '.join(stray)}")
    if kind == "max_weight":
        return MaxWeight()
    if kind == "max_weight_alpha":
        if "alphas" not in obj:
            raise InvalidPolicy("max_weight_alpha requires 'alphas'")
        return MaxWeightAlpha(tuple(obj["alphas"]))
    if "order" not in obj:
        raise InvalidPolicy("priority requires 'order'")
    return Priority(tuple(obj["order"]))


def policy_to_dict(policy: PolicySpec) -> Dict:
    out: Dict = {"kind": policy.kind}
    if isinstance(policy, MaxWeightAlpha):
        out["alphas"] = list(policy.alphas)
    if isinstance(policy, Priority):
        out["order"] = list(policy.order)
    return out
