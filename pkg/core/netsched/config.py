"""
config.py

実験設定（ExperimentConfig）の読み込みと検証。
- JSON ファイル（--config）と CLI 引数を統合（引数が優先）
- ネットワークはプリセット名またはインライン JSON
- 到着率は絶対値ベクトル、または目標 ρ と方向ベクトルで指定
- レプリケーション i のシードは base_seed + i
"""

import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from core.netsched import arrivals as arr
from core.netsched.analysis import scale_to_intensity
from core.netsched.engine import CHECKPOINT_SLOTS, default_warmup
from core.netsched.errors import ConfigError, InvalidHorizon
from core.netsched.model import NetworkSpec, resolve_network
from core.netsched.scheduling import MaxWeight, PolicySpec, load_policy, make_decider


def _get_logger() -> logging.Logger:
    logger = logging.getLogger(__name__)
    if not logger.hasHandlers():
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('[%(levelname)s] %(name)s: %(message)s'))
        logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return logger

logger = _get_logger()

THREADS_ENV = "MWSCHED_THREADS"
DEFAULT_HORIZON = 10 ** 6
DEFAULT_OUTPUT_DIR = "out"


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkSpec
    arrivals: Tuple[arr.ArrivalSpec, ...]
    policy: PolicySpec = MaxWeight()
    horizon: int = DEFAULT_HORIZON
    warmup: Optional[int] = None
    replications: int = 1
    base_seed: int = 0
    checkpoints: Tuple[int, ...] = CHECKPOINT_SLOTS
    output_dir: Path = Path(DEFAULT_OUTPUT_DIR)
    collect: str = "warmup"

    def __post_init__(self):
        if len(self.arrivals) != self.network.num_flows:
            logger.error("Config has %d arrival specs for %d flows", len(self.arrivals), self.network.num_flows)
            raise ConfigError(f"expected {self.network.num_flows} arrival specs, got {len(self.arrivals)}")
        if self.base_seed < 0:
            logger.error("seed must be non-negative, got %d", self.base_seed)
            raise ConfigError("seed must be non-negative")
        if self.replications < 1:
            logger.error("replications must be >= 1, got %d", self.replications)
            raise ConfigError("replications must be >= 1")
        if self.horizon <= 0 or self.effective_warmup >= self.horizon or self.effective_warmup < 0:
            logger.error("Invalid horizon/warmup: T=%s W=%s", self.horizon, self.warmup)
            raise InvalidHorizon(f"need T > W >= 0, got T={self.horizon}, W={self.effective_warmup}")
        if self.collect not in ("warmup", "cycle"):
            raise ConfigError(f"collect must be 'warmup' or 'cycle', got {self.collect!r}")
        # α の個数や優先順位の妥当性
        make_decider(self.policy, self.network)

    @property
    def effective_warmup(self) -> int:
        return default_warmup(self.horizon) if self.warmup is None else self.warmup

    @property
    def seeds(self) -> List[int]:
        return [self.base_seed + i for i in range(self.replications)]

    @property
    def rates(self) -> List[float]:
        return [arr.rate(a) for a in self.arrivals]

    def run_kwargs(self, seed: int) -> Dict[str, Any]:
        return {
            "network": self.network,
            "arrivals": self.arrivals,
            "policy": self.policy,
            "horizon": self.horizon,
            "warmup": self.effective_warmup,
            "seed": seed,
            "checkpoints": self.checkpoints,
            "collect": self.collect,
        }


def set_log_level(level: int) -> None:
    """core.netsched 配下のロガーすべてのレベルを変更します（ワーカー初期化にも使用）。"""
    for name in list(logging.root.manager.loggerDict):
        if name == "core.netsched" or name.startswith("core.netsched."):
            logging.getLogger(name).setLevel(level)


def worker_count() -> int:
    """MWSCHED_THREADS（未設定なら CPU 数）。"""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        logger.error("%s must be a positive integer, got %r", THREADS_ENV, raw)
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def parse_number_list(text: str, cast=float) -> List:
    """'0.3,0.6' や '1e4,1e5' をリストに変換します。"""
    try:
        return [cast(float(tok)) if cast is int else cast(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as e:
        logger.error("Cannot parse number list %r", text)
        raise ConfigError(f"cannot parse number list {text!r}") from e


def build_arrivals(defaults: Sequence[arr.ArrivalSpec], num_flows: int,
                   rates: Optional[Sequence[float]] = None,
                   heavy: Sequence[int] = (),
                   beta: float = arr.DEFAULT_TAIL_INDEX) -> Tuple[arr.ArrivalSpec, ...]:
    """
    既定の到着仕様に CLI 指定を適用します。

    - rates: 各フローのサイズ分布を保ったまま率だけを置換
    - heavy: 指定フローを同じ率の Zeta(β) サイズに置換
    """
    for f in heavy:
        if not 0 <= f < num_flows:
            raise ConfigError(f"--heavy flow {f} out of range [0, {num_flows})")
    if rates is not None and len(rates) != num_flows:
        logger.error("Got %d rates for %d flows", len(rates), num_flows)
        raise ConfigError(f"expected {num_flows} rates, got {len(rates)}")
    heavy_set = set(heavy)
    out = []
    for f in range(num_flows):
        lam = rates[f] if rates is not None else arr.rate(defaults[f])
        if f in heavy_set:
            out.append(arr.heavy(lam, beta))
        elif rates is not None:
            out.append(arr.with_rate(defaults[f], lam))
        else:
            out.append(defaults[f])
    return tuple(out)


def rescale_arrivals(arrivals: Sequence[arr.ArrivalSpec], network: NetworkSpec, rho: float
                     ) -> Tuple[arr.ArrivalSpec, ...]:
    """各フローのサイズ分布を保ったまま、ρ が目標値になるよう率を比例縮尺します。"""
    scaled = scale_to_intensity([arr.rate(a) for a in arrivals], network, rho)
    return tuple(arr.with_rate(a, float(lam)) for a, lam in zip(arrivals, scaled))


def load_config_file(path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        logger.error("Cannot read config %s: %s", path, e)
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return data


def from_mapping(data: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    辞書（JSON 由来）と上書き値から ExperimentConfig を作ります。

    認識するキー: preset, network, arrivals, rates, heavy, beta, rho, policy,
    horizon, warmup, replications, seed, checkpoints, output_dir, collect
    """
    merged: Dict[str, Any] = dict(data)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "preset" in overrides:
        merged.pop("network", None)
        merged.pop("arrivals", None)
    merged.update(overrides)

    network, defaults = resolve_network(merged.get("preset"), merged.get("network"))
    F = network.num_flows
    if "arrivals" in merged:
        if len(merged["arrivals"]) != F:
            raise ConfigError(f"expected {F} arrival specs, got {len(merged['arrivals'])}")
        defaults = tuple(arr.load_arrival(a) for a in merged["arrivals"])
    arrivals = build_arrivals(defaults, F, merged.get("rates"), merged.get("heavy", ()),
                              float(merged.get("beta", arr.DEFAULT_TAIL_INDEX)))
    if merged.get("rho") is not None:
        arrivals = rescale_arrivals(arrivals, network, float(merged["rho"]))

    policy_obj = merged.get("policy", {"kind": "max_weight"})
    if isinstance(policy_obj, str):
        policy_obj = {"kind": policy_obj}
    policy_obj = dict(policy_obj)
    if merged.get("alphas") is not None:
        policy_obj["alphas"] = merged["alphas"]
    if merged.get("order") is not None:
        policy_obj["order"] = merged["order"]
    policy = load_policy(policy_obj)

    try:
        return ExperimentConfig(
            network=network,
            arrivals=arrivals,
            policy=policy,
            horizon=int(float(merged.get("horizon", DEFAULT_HORIZON))),
            warmup=None if merged.get("warmup") is None else int(float(merged["warmup"])),
            replications=int(merged.get("replications", 1)),
            base_seed=int(merged.get("seed", 0)),
            checkpoints=tuple(int(float(c)) for c in merged.get("checkpoints", CHECKPOINT_SLOTS)),
            output_dir=Path(merged.get("output_dir", DEFAULT_OUTPUT_DIR)),
            collect=str(merged.get("collect", "warmup")),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        logger.error("Malformed experiment config: %s", e)
        raise ConfigError(f"malformed experiment config: {e}") from e


def with_arrivals(config: ExperimentConfig, arrivals: Sequence[arr.ArrivalSpec]) -> ExperimentConfig:
    return replace(config, arrivals=tuple(arrivals))
