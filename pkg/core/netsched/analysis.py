"""
analysis.py

静的解析モジュール。
- トラフィック強度 ρ（スケジュール混合の LP、scipy.optimize.linprog / HiGHS）
- 被覆数 k*（分枝限定法による厳密最小集合被覆）と S_max
- 流体モデル（分割構造のスケジュール集合での退去率 μ_f とレート不安定しきい値）
- 遅延安定性の分類と Max-Weight-α のモーメント上界、ベルヌーイ到着での上界
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from core.netsched import arrivals as arr
from core.netsched.errors import (
    ConfigError,
    InfiniteMoment,
    InstanceTooLarge,
    NotApplicable,
    RhoNotAdmissible,
    SingularSystem,
)
from core.netsched.model import NetworkSpec, conflicts
from core.netsched.scheduling import MaxWeightAlpha, PolicySpec, behaves_as_max_weight


def _get_logger() -> logging.Logger:
    logger = logging.getLogger(__name__)
    if not logger.hasHandlers():
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('[%(levelname)s] %(name)s: %(message)s'))
        logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return logger

logger = _get_logger()

LP_TOLERANCE = 1e-9
FLUID_RESIDUAL = 1e-10
MAX_COVER_SCHEDULES = 10 ** 4
MAX_COVER_FLOWS = 64


# ---------------------------------------------------------------- ρ

@dataclass(frozen=True)
class IntensitySolution:
    rho: float
    zeta: np.ndarray

    @property
    def admissible(self) -> bool:
        return self.rho < 1.0


def _rate_vector(rates: Sequence[float], spec: NetworkSpec) -> np.ndarray:
    lam = np.asarray(rates, dtype=float)
    if lam.shape != (spec.num_flows,):
        logger.error("Rate vector of length %d does not match %d flows", lam.size, spec.num_flows)
        raise ConfigError(f"expected {spec.num_flows} rates, got {lam.size}")
    if (lam < 0).any() or not np.isfinite(lam).all():
        logger.error("Rates must be finite and non-negative: %s", lam)
        raise ConfigError("rates must be finite and non-negative")
    return lam


def intensity_solution(rates: Sequence[float], spec: NetworkSpec) -> IntensitySolution:
    """
    min Σ_s ζ_s  s.t.  Σ_s ζ_s s_f >= λ_f, ζ >= 0 を解きます。

    Returns:
        IntensitySolution: 最適値 ρ と主問題の解 ζ（可行性を 1e-9 で検証済み）
    """
    lam = _rate_vector(rates, spec)
    A = spec.incidence.astype(float)        # |S| x F
    n = A.shape[0]
    res = linprog(
        c=np.ones(n),
        A_ub=-A.T,
        b_ub=-lam,
        bounds=[(0, None)] * n,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        logger.error("Traffic-intensity LP failed: %s", res.message)
        raise RuntimeError(f"traffic-intensity LP failed: {res.message}")
    zeta = np.clip(res.x, 0.0, None)
    # 数値誤差で不足したフローがあれば、そのフローを含む最初のスケジュールを補う
    short = lam - A.T @ zeta
    for f in np.flatnonzero(short > 0):
        s = int(np.flatnonzero(A[:, f])[0])
        zeta[s] += short[f]
    violation = float(np.max(lam - A.T @ zeta, initial=0.0))
    if violation > LP_TOLERANCE:
        logger.warning("LP certificate violates coverage by %.3g", violation)
    return IntensitySolution(float(zeta.sum()), zeta)


def traffic_intensity(rates: Sequence[float], spec: NetworkSpec) -> float:
    """ρ(λ)。ρ < 1 のとき許容（admissible）。"""
    return intensity_solution(rates, spec).rho


def scale_to_intensity(rates: Sequence[float], spec: NetworkSpec, rho: float) -> np.ndarray:
    """方向ベクトル rates を ρ = rho となるようにスケールします（ρ は正斉次）。"""
    lam = _rate_vector(rates, spec)
    current = traffic_intensity(lam, spec)
    if current <= 0:
        raise ConfigError("cannot scale an all-zero rate vector")
    return lam * (rho / current)


# ---------------------------------------------------------------- k*, S_max

def _greedy_cover(masks: Sequence[int], full: int) -> List[int]:
    covered, picked = 0, []
    while covered != full:
        best = max(range(len(masks)), key=lambda i: (masks[i] & ~covered).bit_count())
        picked.append(best)
        covered |= masks[best]
    return picked


def covering_number(spec: NetworkSpec) -> int:
    """
    全フローを覆うのに必要な最小スケジュール数 k*。

    貪欲解を初期上界とする分枝限定法。分岐は「被覆候補が最も少ない未被覆フロー」を
    含むスケジュールについて行い、残りフロー数 / 最大増分 の下界で枝刈りする。

    Raises:
        InstanceTooLarge: F > 64 または |S| > 10^4
    """
    F = spec.num_flows
    if F > MAX_COVER_FLOWS or len(spec.schedules) > MAX_COVER_SCHEDULES:
        logger.error("Covering search refused: F=%d, |S|=%d", F, len(spec.schedules))
        raise InstanceTooLarge(f"covering search limited to F <= {MAX_COVER_FLOWS}, |S| <= {MAX_COVER_SCHEDULES}")
    full = (1 << F) - 1
    # 他のスケジュールの部分集合になっているものは不要
    masks = sorted(set(spec.masks), key=lambda m: -m.bit_count())
    masks = [m for i, m in enumerate(masks) if not any(m & o == m and m != o for o in masks[:i])]
    best = len(_greedy_cover(masks, full))
    options = [[m for m in masks if m >> f & 1] for f in range(F)]

    def search(covered: int, depth: int) -> None:
        nonlocal best
        if covered == full:
            best = min(best, depth)
            return
        uncovered = full & ~covered
        gain = max((m & uncovered).bit_count() for m in masks)
        if depth + -(-uncovered.bit_count() // gain) >= best:
            return
        pivot = min((f for f in range(F) if uncovered >> f & 1), key=lambda f: len(options[f]))
        for m in sorted(options[pivot], key=lambda m: -(m & uncovered).bit_count()):
            search(covered | m, depth + 1)

    search(0, 0)
    logger.debug("Covering number of %s: %d", spec.name, best)
    return best


def s_max(spec: NetworkSpec) -> int:
    return max(len(s) for s in spec.schedules)


# ---------------------------------------------------------------- fluid model

@dataclass(frozen=True)
class FluidSolution:
    applicable: bool
    mu: Optional[Tuple[float, ...]] = None
    rate_unstable: Optional[Tuple[bool, ...]] = None
    thresholds: Optional[Tuple[float, ...]] = None
    drift: Optional[float] = None


def _partition_of(spec: NetworkSpec, subset: Optional[Sequence[int]]) -> Optional[List[Tuple[int, ...]]]:
    chosen = list(range(len(spec.schedules))) if subset is None else list(subset)
    parts = [spec.schedules[i].members for i in chosen]
    owner = [0] * spec.num_flows
    for members in parts:
        for f in members:
            owner[f] += 1
    return parts if all(c == 1 for c in owner) else None


def _fluid_system(parts: List[Tuple[int, ...]], lam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # 未知数: 各スケジュールの共通サービス率 μ_i と共通ドリフト c
    # |s^i| μ_i + c = Σ_{f∈s^i} λ_f,   Σ_i μ_i = 1
    k = len(parts)
    M = np.zeros((k + 1, k + 1))
    rhs = np.zeros(k + 1)
    for i, members in enumerate(parts):
        M[i, i] = len(members)
        M[i, k] = 1.0
        rhs[i] = lam[list(members)].sum()
    M[k, :k] = 1.0
    rhs[k] = 1.0
    return M, rhs


def fluid_solve(rates: Sequence[float], spec: NetworkSpec, schedules: Optional[Sequence[int]] = None,
                strict: bool = False) -> FluidSolution:
    """
    過負荷期間に Max-Weight が全スケジュールの重みを同じ速さで減らすという流体近似から
    各フローの退去率 μ_f を求めます。

    Args:
        rates: 到着率 λ
        spec: ネットワーク
        schedules: 流体モデルに用いるスケジュール番号（省略時は全スケジュール）
        strict: True なら分割構造でない場合に NotApplicable を送出

    Returns:
        FluidSolution: μ_f、λ_f > μ_f のフラグ、他の λ を固定したときのしきい値
    """
    lam = _rate_vector(rates, spec)
    parts = _partition_of(spec, schedules)
    if parts is None:
        if strict:
            logger.error("Fluid model needs a partition of the flows; %s is not one", spec.name)
            raise NotApplicable(f"schedules of {spec.name} do not partition the flows")
        return FluidSolution(applicable=False)

    M, rhs = _fluid_system(parts, lam)
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as e:
        logger.error("Singular fluid system for %s: %s", spec.name, e)
        raise SingularSystem(str(e)) from e
    residual = float(np.abs(M @ sol - rhs).max())
    if residual > FLUID_RESIDUAL:
        raise SingularSystem(f"fluid system residual {residual:.3g} exceeds {FLUID_RESIDUAL}")

    k = len(parts)
    # μ は λ について線形: μ_f(λ_f) = μ_f(0) + d_f λ_f, しきい値は λ_f = μ_f の解
    Minv = np.linalg.inv(M)
    mu = np.zeros(spec.num_flows)
    thresholds = np.zeros(spec.num_flows)
    for i, members in enumerate(parts):
        for f in members:
            mu[f] = sol[i]
            d = Minv[i, i]
            base = sol[i] - d * lam[f]
            thresholds[f] = base / (1.0 - d) if d != 1.0 else math.inf
    unstable = tuple(bool(lam[f] > mu[f]) for f in range(spec.num_flows))
    return FluidSolution(True, tuple(float(x) for x in mu), unstable,
                         tuple(float(x) for x in thresholds), float(sol[k]))


# ---------------------------------------------------------------- bounds

def compute_H(rho: float, k_star: int, alpha: float, m: float) -> float:
    """
    Max-Weight-α の上界関数 H(ρ, k*, α, E[A^{α+1}])。

    α <= 1: 2k*/(1−ρ) · (m + 1)
    α >  1: (2k*/(1−ρ))^α · K^α + 2k*/(1−ρ) · K,  K = 2^{α−1} α (m + 1)
    """
    if math.isinf(m) or math.isnan(m):
        logger.error("H undefined for infinite moment (alpha=%s)", alpha)
        raise InfiniteMoment(f"E[A^(alpha+1)] is infinite for alpha={alpha}")
    if rho >= 1.0:
        logger.error("H undefined for rho=%.4f >= 1", rho)
        raise RhoNotAdmissible(f"rho={rho} is not admissible")
    if k_star < 1 or alpha <= 0:
        raise ConfigError("need k* >= 1 and alpha > 0")
    c = 2.0 * k_star / (1.0 - rho)
    if alpha <= 1.0:
        return c * (m + 1.0)
    K = _K(alpha, m)
    return c ** alpha * K ** alpha + c * K


def _K(alpha: float, m: float) -> float:
    return 2.0 ** (alpha - 1.0) * alpha * (m + 1.0)


@dataclass(frozen=True)
class BoundReport:
    H: Tuple[float, ...]
    K: Tuple[Optional[float], ...]
    total: float


def moment_bound(spec: NetworkSpec, arrival_specs: Sequence[arr.ArrivalSpec], alphas: Sequence[float],
                   rho: Optional[float] = None, k_star: Optional[int] = None) -> BoundReport:
    """
    Σ_f E[Q_f^{α_f}] <= Σ_f H(ρ, k*, α_f, E[A_f^{α_f+1}])。

    Raises:
        InfiniteMoment: E[A_f^{α_f+1}] = ∞ のフローがある場合（flow 属性に番号）
        RhoNotAdmissible: ρ >= 1
    """
    if len(arrival_specs) != spec.num_flows or len(alphas) != spec.num_flows:
        raise ConfigError("need one arrival spec and one alpha per flow")
    if rho is None:
        rho = traffic_intensity([arr.rate(a) for a in arrival_specs], spec)
    if k_star is None:
        k_star = covering_number(spec)
    H, K = [], []
    for f, (a, alpha) in enumerate(zip(arrival_specs, alphas)):
        m = arr.moment(a, alpha + 1.0)
        if math.isinf(m):
            logger.error("Flow %d has infinite E[A^%.3g]", f, alpha + 1.0)
            raise InfiniteMoment(f"flow {f}: E[A^{alpha + 1.0:g}] is infinite", flow=f)
        H.append(compute_H(rho, k_star, alpha, m))
        K.append(_K(alpha, m) if alpha > 1.0 else None)
    return BoundReport(tuple(H), tuple(K), float(sum(H)))


def bernoulli_bound(rho: float, k_star: int, s_max_value: int) -> float:
    """ベルヌーイ到着・Max-Weight: Σ E[Q_f] <= 2 k* S_max (1+ρ)/(1−ρ)。"""
    if rho >= 1.0:
        logger.error("Bernoulli bound undefined for rho=%.4f >= 1", rho)
        raise RhoNotAdmissible(f"rho={rho} is not admissible")
    return 2.0 * k_star * s_max_value * (1.0 + rho) / (1.0 - rho)


def light_tailed_bound(rho: float, k_star: int, s_max_value: int, second_moments: Sequence[float]) -> float:
    """軽い裾・α ≡ 1 の Max-Weight: Σ E[Q_f] <= 2k*/(1−ρ) · (S_max + Σ E[A_f^2])。"""
    if rho >= 1.0:
        raise RhoNotAdmissible(f"rho={rho} is not admissible")
    total = float(sum(second_moments))
    if math.isinf(total):
        raise InfiniteMoment("some flow has infinite second moment")
    return 2.0 * k_star / (1.0 - rho) * (s_max_value + total)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """log y = a + b log x の最小二乗傾き b。"""
    x = np.log(np.asarray(xs, dtype=float))
    y = np.log(np.asarray(ys, dtype=float))
    if x.size < 2:
        raise ValueError("need at least two points for a slope")
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------- classification

class FlowClass(str, Enum):
    HEAVY_TAIL_UNSTABLE = "HeavyTailUnstable"
    CONFLICT_UNSTABLE = "ConflictUnstable"
    RATE_UNSTABLE = "RateUnstable"
    UNDETERMINED = "Undetermined"

    @property
    def unstable(self) -> bool:
        return self is not FlowClass.UNDETERMINED


@dataclass(frozen=True)
class FlowReport:
    id: int
    label: str
    rate: float
    heavy: bool
    cls: FlowClass
    mu: Optional[float] = None
    threshold: Optional[float] = None
    H: Optional[float] = None
    finite_bound: bool = False


@dataclass(frozen=True)
class StabilityReport:
    network: str
    policy: str
    rho: float
    admissible: bool
    k_star: int
    s_max: int
    flows: Tuple[FlowReport, ...]
    bounds: Dict[str, Optional[float]] = field(default_factory=dict)
    fluid_applicable: bool = False

    def unstable_flows(self) -> Tuple[int, ...]:
        return tuple(r.id for r in self.flows if r.cls.unstable)

    def to_dict(self) -> Dict:
        def num(x):
            return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x
        return {
            "network": self.network,
            "policy": self.policy,
            "rho": self.rho,
            "admissible": self.admissible,
            "k_star": self.k_star,
            "s_max": self.s_max,
            "fluid_applicable": self.fluid_applicable,
            "flows": [
                {"id": r.id, "label": r.label, "rate": r.rate, "heavy": r.heavy, "class": r.cls.value,
                 "mu": num(r.mu), "threshold": num(r.threshold), "H": num(r.H), "finite_bound": r.finite_bound}
                for r in self.flows
            ],
            "bounds": {k: num(v) for k, v in self.bounds.items()},
        }


def classify_flows(spec: NetworkSpec, arrival_specs: Sequence[arr.ArrivalSpec], policy: PolicySpec,
                   fluid_schedules: Optional[Sequence[int]] = None) -> StabilityReport:
    """
    フローごとの遅延安定性を分類します。

    - 重い裾のフロー: 任意の再生的ポリシーで HeavyTailUnstable
    - Max-Weight 下で重い裾のフローと衝突する軽い裾のフロー: ConflictUnstable
    - Max-Weight 下で流体モデルが適用でき λ_f > μ_f: RateUnstable
    - それ以外: Undetermined（Max-Weight-α では有限上界の有無を finite_bound に記録）
    """
    F = spec.num_flows
    if len(arrival_specs) != F:
        raise ConfigError(f"expected {F} arrival specs, got {len(arrival_specs)}")
    rates = [arr.rate(a) for a in arrival_specs]
    heavy = [arr.is_heavy_tailed(a) for a in arrival_specs]
    rho = traffic_intensity(rates, spec)
    admissible = rho < 1.0
    k_star = covering_number(spec)
    smax = s_max(spec)
    mw = behaves_as_max_weight(policy)
    if not admissible:
        logger.warning("Rates %s are not admissible for %s (rho=%.4f)", rates, spec.name, rho)

    fluid = fluid_solve(rates, spec, fluid_schedules)
    classes = []
    for f in range(F):
        if heavy[f]:
            classes.append(FlowClass.HEAVY_TAIL_UNSTABLE)
        elif mw and any(heavy[h] and conflicts(spec, f, h) for h in range(F) if h != f):
            classes.append(FlowClass.CONFLICT_UNSTABLE)
        elif mw and any(heavy) and admissible and fluid.applicable and fluid.rate_unstable[f]:
            classes.append(FlowClass.RATE_UNSTABLE)
        else:
            classes.append(FlowClass.UNDETERMINED)

    bounds: Dict[str, Optional[float]] = {}
    H: List[Optional[float]] = [None] * F
    if admissible and (mw or isinstance(policy, MaxWeightAlpha)):
        try:
            report = moment_bound(spec, arrival_specs, policy.alphas_for(F), rho, k_star)
            H = list(report.H)
            bounds["moment_total"] = report.total
        except InfiniteMoment as e:
            logger.info("Moment bound unavailable: %s", e)
            bounds["moment_total"] = None
        if mw and not any(heavy):
            bounds["light_tailed"] = light_tailed_bound(
                rho, k_star, smax, [arr.moment(a, 2.0) for a in arrival_specs])
            if all(a.size == arr.Constant(1) for a in arrival_specs):
                bounds["bernoulli"] = bernoulli_bound(rho, k_star, smax)

    flows = tuple(
        FlowReport(
            id=f,
            label=spec.label(f),
            rate=rates[f],
            heavy=heavy[f],
            cls=classes[f],
            mu=fluid.mu[f] if fluid.applicable else None,
            threshold=fluid.thresholds[f] if fluid.applicable else None,
            H=H[f],
            finite_bound=H[f] is not None,
        )
        for f in range(F)
    )
    logger.info("Classified %s under %s: rho=%.4f, unstable=%s",
                spec.name, policy.kind, rho, [r.id for r in flows if r.cls.unstable])
    return StabilityReport(spec.name, policy.kind, rho, admissible, k_star, smax, flows, bounds, fluid.applicable)
