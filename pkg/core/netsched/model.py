"""
model.py

シングルホップ待ち行列ネットワークの構造定義モジュール。
- フロー数 F と実行可能スケジュール集合 S を保持する NetworkSpec
- スケジュールはビットマスク（F <= 64）として扱う
- 仕様の正規化・検証（重複除去、メンバーのソート、未サービスフロー検出）
- 論文中のトポロジー（並列キュー、Fig.1-3、スイッチ、リング、グリッド）のプリセット
- JSON スキーマとの相互変換
"""

import itertools
import logging
import re
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.netsched import arrivals as arr
from core.netsched.errors import (
    ConfigError,
    EmptySchedule,
    FlowIdOutOfRange,
    FlowNeverServed,
    InstanceTooLarge,
    PresetTooLarge,
    UnknownPreset,
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

# ビットマスク表現の上限
MAX_FLOWS = 64
# switch(n) は n! 個の完全マッチングを列挙するため上限を設ける
MAX_SWITCH_PORTS = 5
MAX_GRID_SIDE = 6

FlowId = int


@dataclass(frozen=True)
class Schedule:
    """同時にサービス可能なフローの集合。"""
    members: Tuple[FlowId, ...]

    @cached_property
    def mask(self) -> int:
        m = 0
        for f in self.members:
            m |= 1 << f
        return m

    def __contains__(self, flow: int) -> bool:
        return flow in self.members

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class NetworkSpec:
    num_flows: int
    schedules: Tuple[Schedule, ...]
    name: str = "network"
    flow_labels: Tuple[str, ...] = field(default=(), compare=False)

    @cached_property
    def masks(self) -> Tuple[int, ...]:
        return tuple(s.mask for s in self.schedules)

    @cached_property
    def incidence(self) -> np.ndarray:
        """|S| x F の 0/1 行列（読み取り専用）。"""
        mat = np.zeros((len(self.schedules), self.num_flows), dtype=np.int64)
        for i, s in enumerate(self.schedules):
            mat[i, list(s.members)] = 1
        mat.setflags(write=False)
        return mat

    def label(self, flow: int) -> str:
        if self.flow_labels:
            return self.flow_labels[flow]
        return str(flow)


def network(num_flows: int, schedules: Iterable[Iterable[int]], name: str = "network",
            flow_labels: Sequence[str] = ()) -> NetworkSpec:
    """生のリストから未検証の NetworkSpec を組み立てます。"""
    return NetworkSpec(
        num_flows=num_flows,
        schedules=tuple(Schedule(tuple(s)) for s in schedules),
        name=name,
        flow_labels=tuple(flow_labels),
    )


def validate_network(raw: NetworkSpec) -> NetworkSpec:
    """
    NetworkSpec を検証し、正規化したコピーを返します。

    - 各スケジュールのメンバーをソート・重複除去
    - 集合として同一のスケジュールを除去（最初の出現順を保持）
    - すべてのフローが少なくとも 1 つのスケジュールに含まれることを確認

    Raises:
        EmptySchedule: 空のスケジュールがある場合
        FlowIdOutOfRange: フロー番号が [0, F) の外にある場合
        FlowNeverServed: どのスケジュールにも含まれないフローがある場合
        InstanceTooLarge: F が 64 を超える場合
    """
    F = raw.num_flows
    if not isinstance(F, (int, np.integer)) or F <= 0:
        logger.error("num_flows must be a positive integer, got %r", F)
        raise ConfigError(f"num_flows must be a positive integer, got {F!r}")
    if F > MAX_FLOWS:
        logger.error("num_flows %d exceeds bitmask limit %d", F, MAX_FLOWS)
        raise InstanceTooLarge(f"num_flows {F} exceeds the limit of {MAX_FLOWS}")
    if raw.flow_labels and len(raw.flow_labels) != F:
        raise ConfigError("flow_labels must have one entry per flow")

    seen = set()
    normalized: List[Schedule] = []
    for idx, s in enumerate(raw.schedules):
        members = sorted(set(int(f) for f in s.members))
        if not members:
            logger.error("Schedule #%d of %s is empty", idx, raw.name)
            raise EmptySchedule(f"schedule #{idx} is empty")
        for f in members:
            if not 0 <= f < F:
                logger.error("Schedule #%d references flow %d outside [0, %d)", idx, f, F)
                raise FlowIdOutOfRange(f, F)
        key = tuple(members)
        if key in seen:
            continue
        seen.add(key)
        normalized.append(Schedule(key))

    covered = 0
    for s in normalized:
        covered |= s.mask
    for f in range(F):
        if not covered >> f & 1:
            logger.error("Flow %d of %s is never served", f, raw.name)
            raise FlowNeverServed(f)

    if len(normalized) < len(raw.schedules):
        logger.debug("Dropped %d duplicate schedules from %s",
                     len(raw.schedules) - len(normalized), raw.name)
    return NetworkSpec(F, tuple(normalized), raw.name, tuple(raw.flow_labels))


def _check_flow(spec: NetworkSpec, f: int) -> None:
    if not 0 <= f < spec.num_flows:
        logger.error("Flow id %d out of range for %s", f, spec.name)
        raise FlowIdOutOfRange(f, spec.num_flows)


def conflicts(spec: NetworkSpec, f: FlowId, g: FlowId) -> bool:
    """f と g を同時に含むスケジュールが存在しなければ True。"""
    _check_flow(spec, f)
    _check_flow(spec, g)
    pair = (1 << f) | (1 << g)
    return not any(m & pair == pair for m in spec.masks)


def schedules_containing(spec: NetworkSpec, f: FlowId) -> Tuple[int, ...]:
    _check_flow(spec, f)
    return tuple(i for i, m in enumerate(spec.masks) if m >> f & 1)


# ---------------------------------------------------------------- presets

def _parallel(n: int) -> NetworkSpec:
    if n < 1:
        raise UnknownPreset("parallel(n) requires n >= 1")
    if n > MAX_FLOWS:
        raise PresetTooLarge(f"parallel({n}) exceeds {MAX_FLOWS} flows")
    return network(n, [[f] for f in range(n)], name=f"parallel({n})")


def _switch(n: int) -> NetworkSpec:
    if n < 1:
        raise UnknownPreset("switch(n) requires n >= 1")
    if n > MAX_SWITCH_PORTS:
        logger.error("switch(%d) requested; enumeration is limited to n <= %d", n, MAX_SWITCH_PORTS)
        raise PresetTooLarge(f"switch({n}) has {n}! matchings; n <= {MAX_SWITCH_PORTS} supported")
    # フロー (i, j) -> i * n + j、ラベルは 1 始まり
    labels = [f"({i + 1},{j + 1})" for i in range(n) for j in range(n)]
    schedules = [[i * n + perm[i] for i in range(n)] for perm in itertools.permutations(range(n))]
    return network(n * n, schedules, name=f"switch({n})", flow_labels=labels)


def _grid(n: int) -> NetworkSpec:
    """
    n x n グリッド上の 1 ホップ干渉モデル。

    辺を水平/垂直 x 偶奇の 4 クラス（各クラスはマッチング）に分け、
    それぞれを貪欲に極大マッチングへ拡張したものをスケジュールとする。
    """
    if n < 2:
        raise UnknownPreset("grid(n) requires n >= 2")
    if n > MAX_GRID_SIDE:
        raise PresetTooLarge(f"grid({n}) exceeds {MAX_FLOWS} flows")
    edges: List[Tuple[Tuple[int, int], Tuple[int, int]]] = []
    classes: Dict[Tuple[str, int], List[int]] = {}
    for r in range(n):
        for c in range(n - 1):
            classes.setdefault(("h", c % 2), []).append(len(edges))
            edges.append(((r, c), (r, c + 1)))
    for r in range(n - 1):
        for c in range(n):
            classes.setdefault(("v", r % 2), []).append(len(edges))
            edges.append(((r, c), (r + 1, c)))

    schedules = []
    for key in sorted(classes):
        chosen = list(classes[key])
        used = {node for e in chosen for node in edges[e]}
        for e, (a, b) in enumerate(edges):
            if e not in chosen and a not in used and b not in used:
                chosen.append(e)
                used.update((a, b))
        schedules.append(chosen)
    labels = [f"{a}-{b}" for a, b in edges]
    return network(len(edges), schedules, name=f"grid({n})", flow_labels=labels)


def _fixed(name: str) -> NetworkSpec:
    if name == "fig1":
        return network(2, [[0], [1]], name="fig1")
    if name == "fig2":
        return network(3, [[0], [1, 2]], name="fig2")
    if name == "fig3":
        return network(3, [[0, 1], [2]], name="fig3")
    if name == "ring6":
        return network(6, [[0, 3], [1, 4], [2, 5]], name="ring6")
    if name == "switch2x2":
        spec = _switch(2)
        return NetworkSpec(spec.num_flows, spec.schedules, "switch2x2", spec.flow_labels)
    raise UnknownPreset(f"unknown preset: {name}")


_PARAM_RE = re.compile(r"^(parallel|switch|grid)\(?(\d+)\)?$")

# パラメータ付きプリセットの既定負荷（ρ の目安）
DEFAULT_LOAD = 0.8


def _default_arrivals(name: str, spec: NetworkSpec) -> Tuple[arr.ArrivalSpec, ...]:
    F = spec.num_flows
    if name == "fig1":
        return (arr.ArrivalSpec(0.1, arr.Zeta(arr.DEFAULT_TAIL_INDEX)), arr.bernoulli(0.3))
    if name == "fig2":
        return (arr.ArrivalSpec(0.1, arr.Zeta(arr.DEFAULT_TAIL_INDEX)), arr.bernoulli(0.3), arr.bernoulli(0.3))
    if name == "fig3":
        return (arr.heavy(0.3), arr.bernoulli(0.3), arr.bernoulli(0.3))
    if name == "ring6":
        return tuple(arr.bernoulli(0.25) for _ in range(F))
    if name.startswith("grid"):
        return tuple(arr.bernoulli(0.15) for _ in range(F))
    # parallel(n), switch(n): 対称負荷 DEFAULT_LOAD
    per_flow = DEFAULT_LOAD / (F if name.startswith("parallel") else int(round(F ** 0.5)))
    return tuple(arr.bernoulli(per_flow) for _ in range(F))


@lru_cache(maxsize=32)
def preset(name: str) -> Tuple[NetworkSpec, Tuple[arr.ArrivalSpec, ...]]:
    """
    名前付きトポロジーと既定の到着仕様を返します。

    Args:
        name: parallel(n) / parallelN, fig1, fig2, fig3, switch2x2, ring6,
              switch(n), grid(n)

    Raises:
        UnknownPreset: 未知の名前
        PresetTooLarge: 列挙上限を超えるサイズ
    """
    key = name.strip().lower().replace(" ", "")
    m = _PARAM_RE.match(key)
    try:
        if m:
            kind, n = m.group(1), int(m.group(2))
            raw = {"parallel": _parallel, "switch": _switch, "grid": _grid}[kind](n)
            key = kind
        else:
            raw = _fixed(key)
    except UnknownPreset:
        logger.error("Unknown preset requested: %s", name)
        raise
    spec = validate_network(raw)
    logger.debug("Loaded preset %s: F=%d, |S|=%d", spec.name, spec.num_flows, len(spec.schedules))
    return spec, _default_arrivals(key, spec)


# ---------------------------------------------------------------- JSON

def load_network(obj: Mapping) -> NetworkSpec:
    """{"name", "num_flows", "schedules"} 形式の辞書から検証済み仕様を作ります。"""
    try:
        raw = network(
            int(obj["num_flows"]),
            [[int(f) for f in s] for s in obj["schedules"]],
            name=str(obj.get("name", "network")),
            flow_labels=obj.get("flow_labels", ()),
        )
    except (KeyError, TypeError, ValueError) as e:
        logger.error("Malformed network JSON: %s", e)
        raise ConfigError(f"malformed network specification: {e}") from e
    return validate_network(raw)


def network_to_dict(spec: NetworkSpec) -> Dict:
    out = {
        "name": spec.name,
        "num_flows": spec.num_flows,
        "schedules": [list(s.members) for s in spec.schedules],
    }
    if spec.flow_labels:
        out["flow_labels"] = list(spec.flow_labels)
    return out


def resolve_network(preset_name: Optional[str] = None, inline: Optional[Mapping] = None
                    ) -> Tuple[NetworkSpec, Tuple[arr.ArrivalSpec, ...]]:
    """プリセット名またはインライン JSON からネットワークを得ます（インライン優先）。"""
    if inline is not None:
        spec = load_network(inline)
        # 各フローを自身を含むスケジュールで覆えば ρ <= DEFAULT_LOAD
        return spec, tuple(arr.bernoulli(DEFAULT_LOAD / spec.num_flows) for _ in range(spec.num_flows))
    if preset_name is None:
        raise ConfigError("either a preset name or an inline network is required")
    return preset(preset_name)
