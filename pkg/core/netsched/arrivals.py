"""
arrivals.py

フローごとの IID ファイル到着過程モジュール。
- 各スロットで確率 p_f でファイル（バッチ）が 1 つ到着し、サイズは独立に抽選
- サイズ分布: Constant / Geometric / Zeta（裾指数 β > 1）
- 解析的なモーメント E[A^m]、到着率 λ_f、重い裾判定（E[A^2] = ∞）
- Zeta は逆 CDF 表（k <= 10^6）と解析的な裾近似によるサンプリング
- ζ 関数は scipy.special.zeta（Riemann / Hurwitz）を使用
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Mapping, Optional, Union

import numpy as np
from scipy import special

from core.netsched.errors import ConfigError, InvalidArrivalSpec


def _get_logger() -> logging.Logger:
    logger = logging.getLogger(__name__)
    if not logger.hasHandlers():
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('[%(levelname)s] %(name)s: %(message)s'))
        logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return logger

logger = _get_logger()

# 逆 CDF 表の大きさ（これを超えるサイズは解析的な裾で反転）
ZETA_TABLE_SIZE = 10 ** 6
# --heavy 指定時の既定の裾指数
DEFAULT_TAIL_INDEX = 1.5
# これ以上の q では幾何分布モーメントを直接和で求める（項は (1-q)^k で減衰）
_GEOMETRIC_DIRECT_MIN_Q = 0.5
_POLYLOG_TERMS = 60
_MAX_SIZE = 2 ** 62


@dataclass(frozen=True)
class Constant:
    k: int = 1
    kind = "constant"

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            logger.error("Constant size must be a positive integer, got %r", self.k)
            raise InvalidArrivalSpec(f"constant size must be a positive integer, got {self.k!r}")


@dataclass(frozen=True)
class Geometric:
    success_prob: float
    kind = "geometric"

    def __post_init__(self):
        if not 0.0 < self.success_prob <= 1.0:
            logger.error("Geometric success_prob must lie in (0, 1], got %r", self.success_prob)
            raise InvalidArrivalSpec(f"geometric success_prob must lie in (0, 1], got {self.success_prob!r}")


@dataclass(frozen=True)
class Zeta:
    """P(size = k) = k^-(β+1) / ζ(β+1), k >= 1。"""
    tail_index: float
    kind = "zeta"

    def __post_init__(self):
        if not self.tail_index > 1.0 or not math.isfinite(self.tail_index):
            logger.error("Zeta tail_index must be finite and > 1, got %r", self.tail_index)
            raise InvalidArrivalSpec(f"zeta tail_index must be > 1 (finite rate), got {self.tail_index!r}")


SizeDistribution = Union[Constant, Geometric, Zeta]


@dataclass(frozen=True)
class ArrivalSpec:
    file_prob: float
    size: SizeDistribution = Constant(1)

    def __post_init__(self):
        if not 0.0 < self.file_prob <= 1.0:
            logger.error("file_prob must lie in (0, 1], got %r", self.file_prob)
            raise InvalidArrivalSpec(f"file_prob must lie in (0, 1], got {self.file_prob!r}")


def bernoulli(rate: float) -> ArrivalSpec:
    """単位サイズのベルヌーイ到着（p = λ）。"""
    return ArrivalSpec(rate, Constant(1))


def heavy(rate: float, beta: float = DEFAULT_TAIL_INDEX) -> ArrivalSpec:
    """到着率が rate になるよう p を選んだ Zeta(β) 到着。"""
    size = Zeta(beta)
    p = rate / size_moment(size, 1.0)
    if not 0.0 < p <= 1.0:
        logger.error("rate %.4f is not reachable with Zeta(%.3f) sizes (p=%.4f)", rate, beta, p)
        raise InvalidArrivalSpec(f"rate {rate} needs file_prob {p:.4f} outside (0, 1]")
    return ArrivalSpec(p, size)


@lru_cache(maxsize=64)
def riemann_zeta(s: float) -> float:
    """ζ(s)。s <= 1 では +∞。"""
    if s <= 1.0:
        return math.inf
    return float(special.zeta(s))


def _eulerian_moment(q: float, m: int) -> float:
    """整数次数: E[X^m] = A_m(1-q) / q^m（A_m は Euler 多項式）。"""
    r = 1.0 - q
    poly = 0.0
    for j in range(m):
        a = sum((-1) ** i * math.comb(m + 1, i) * (j + 1 - i) ** m for i in range(j + 1))
        poly += a * r ** j
    return poly / q ** m


def _polylog_moment(q: float, m: float) -> float:
    """
    実数次数: E[X^m] = (q/r) Li_{-m}(r), r = 1-q。

    Li_{-m}(e^μ) = Γ(1+m)(-μ)^{-m-1} + Σ_k ζ(-m-k) μ^k / k!  (|μ| < 2π)
    """
    r = 1.0 - q
    mu = math.log1p(-q)
    total = math.gamma(1.0 + m) * (-mu) ** (-m - 1.0)
    term_scale = 1.0
    # 項比はおよそ |μ|/2π（q < 0.5 で 0.11 未満）。ζ の自明な零点付近で項が消えるので打ち切り判定はしない
    for k in range(_POLYLOG_TERMS):
        total += float(special.zeta(-m - k)) * term_scale
        term_scale *= mu / (k + 1)
    return q / r * total


def _geometric_moment(q: float, m: float) -> float:
    if q == 1.0 or m == 0:
        return 1.0
    if float(m).is_integer():
        return _eulerian_moment(q, int(m))
    if q < _GEOMETRIC_DIRECT_MIN_Q:
        return _polylog_moment(q, m)
    # 項 k^m (1-q)^(k-1) が無視できるところまで（対数領域で）和をとる
    n_terms = int(math.ceil((50.0 + 10.0 * m) / q)) + 10
    k = np.arange(1, n_terms + 1, dtype=float)
    log_terms = m * np.log(k) + (k - 1.0) * math.log1p(-q)
    return float(q * np.exp(log_terms).sum())


def size_moment(size: SizeDistribution, m: float) -> float:
    """E[size^m]（発散時は +∞）。"""
    if isinstance(size, Constant):
        return float(size.k) ** m
    if isinstance(size, Geometric):
        return _geometric_moment(size.success_prob, m)
    if isinstance(size, Zeta):
        if m >= size.tail_index:
            return math.inf
        beta = size.tail_index
        return riemann_zeta(beta + 1.0 - m) / riemann_zeta(beta + 1.0)
    raise InvalidArrivalSpec(f"unknown size distribution: {size!r}")


def moment(spec: ArrivalSpec, m: float) -> float:
    """
    E[A^m] = p_f * E[size^m] を返します。

    Args:
        spec: 到着仕様
        m: 正の次数（実数可）

    Returns:
        float: モーメント（発散時は math.inf）
    """
    if not m > 0:
        logger.error("moment order must be positive, got %r", m)
        raise ConfigError(f"moment order must be positive, got {m!r}")
    value = size_moment(spec.size, m)
    if math.isinf(value):
        return math.inf
    return spec.file_prob * value


def rate(spec: ArrivalSpec) -> float:
    return moment(spec, 1.0)


def is_heavy_tailed(spec: ArrivalSpec) -> bool:
    return math.isinf(moment(spec, 2.0))


def size_survival(size: SizeDistribution, k: int) -> float:
    """P(size > k)。"""
    if k < 1:
        return 1.0
    if isinstance(size, Constant):
        return 1.0 if k < size.k else 0.0
    if isinstance(size, Geometric):
        return (1.0 - size.success_prob) ** k
    if isinstance(size, Zeta):
        s = size.tail_index + 1.0
        return float(special.zeta(s, k + 1.0)) / riemann_zeta(s)
    raise InvalidArrivalSpec(f"unknown size distribution: {size!r}")


@lru_cache(maxsize=8)
def _zeta_survival_table(beta: float) -> np.ndarray:
    """sf[k-1] = P(size > k), k = 1..ZETA_TABLE_SIZE（単調減少）。"""
    logger.debug("Building zeta survival table for beta=%s", beta)
    s = beta + 1.0
    ks = np.arange(2, ZETA_TABLE_SIZE + 2, dtype=float)
    sf = special.zeta(s, ks) / riemann_zeta(s)
    sf.setflags(write=False)
    return sf


def _sample_zeta(beta: float, rng: np.random.Generator, n: int) -> np.ndarray:
    sf = _zeta_survival_table(beta)
    v = 1.0 - rng.random(n)  # (0, 1]
    # size = P(size > k) < v を満たす最小の k
    idx = np.searchsorted(-sf, -v, side="right")
    out = idx.astype(np.int64) + 1
    tail = idx >= sf.size
    if tail.any():
        # 表の外側: P(size > k) ≈ k^-β / (β ζ(β+1)) を反転
        scale = beta * riemann_zeta(beta + 1.0)
        k = np.floor((v[tail] * scale) ** (-1.0 / beta)) + 1.0
        k = np.clip(k, ZETA_TABLE_SIZE + 1, _MAX_SIZE)
        out[tail] = k.astype(np.int64)
    return out


def _sample_sizes(size: SizeDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    if isinstance(size, Constant):
        return np.full(n, size.k, dtype=np.int64)
    if isinstance(size, Geometric):
        return rng.geometric(size.success_prob, size=n).astype(np.int64)
    return _sample_zeta(size.tail_index, rng, n)


def sample_block(spec: ArrivalSpec, rng: np.random.Generator, n: int,
                 size_rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    n スロット分の到着パケット数（int64 配列）。

    size_rng を渡すとファイルサイズはそちらから抽選する（発生とサイズの系列が分離され、
    ブロックの切り方によらず同じ標本路になる）。
    """
    out = np.zeros(n, dtype=np.int64)
    hit = rng.random(n) < spec.file_prob
    count = int(hit.sum())
    if count:
        out[hit] = _sample_sizes(spec.size, rng if size_rng is None else size_rng, count)
    return out


def sample(spec: ArrivalSpec, rng: Optional[np.random.Generator] = None, seed: Optional[int] = None) -> int:
    """1 スロット分の到着パケット数。"""
    if rng is None:
        rng = np.random.default_rng(seed)
    return int(sample_block(spec, rng, 1)[0])


# ---------------------------------------------------------------- JSON

def load_arrival(obj: Mapping) -> ArrivalSpec:
    """{"file_prob": p, "size": {"kind": ..., ...}} から ArrivalSpec を作ります。"""
    try:
        size_obj = obj.get("size", {"kind": "constant", "k": 1})
        kind = size_obj.get("kind", "constant")
        if kind == "constant":
            size = Constant(int(size_obj.get("k", 1)))
        elif kind == "geometric":
            size = Geometric(float(size_obj["success_prob"]))
        elif kind == "zeta":
            size = Zeta(float(size_obj.get("tail_index", size_obj.get("beta", DEFAULT_TAIL_INDEX))))
        else:
            logger.error("Unknown size kind: %s", kind)
            raise InvalidArrivalSpec(f"unknown size kind: {kind!r}")
        return ArrivalSpec(float(obj["file_prob"]), size)
    except InvalidArrivalSpec:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        logger.error("Malformed arrival JSON %r: %s", obj, e)
        raise InvalidArrivalSpec(f"malformed arrival specification: {e}") from e


def arrival_to_dict(spec: ArrivalSpec) -> Dict:
    size = spec.size
    if isinstance(size, Constant):
        size_obj = {"kind": "constant", "k": size.k}
    elif isinstance(size, Geometric):
        size_obj = {"kind": "geometric", "success_prob": size.success_prob}
    else:
        size_obj = {"kind": "zeta", "tail_index": size.tail_index}
    return {"file_prob": spec.file_prob, "size": size_obj}


def with_rate(spec: ArrivalSpec, new_rate: float) -> ArrivalSpec:
    """サイズ分布を保ったまま p を調整して到着率を new_rate にします。"""
    p = new_rate / size_moment(spec.size, 1.0)
    if not 0.0 < p <= 1.0:
        logger.error("Rate %.4f unreachable for %r (file_prob would be %.4f)", new_rate, spec.size, p)
        raise InvalidArrivalSpec(f"rate {new_rate} needs file_prob {p:.4f} outside (0, 1]")
    return ArrivalSpec(p, spec.size)
