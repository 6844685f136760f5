"""
errors.py

netsched パッケージ共通の例外定義。
- 入力検証系は ConfigError（ValueError 互換）の派生
- 解析・統計系は NetschedError の派生
"""

from typing import Optional


class NetschedError(Exception):
    """Base class for every error raised by core.netsched."""


class ConfigError(NetschedError, ValueError):
    """Invalid network, arrival, policy or experiment specification."""


class EmptySchedule(ConfigError):
    pass


class FlowNeverServed(ConfigError):
    def __init__(self, flow: int):
        super().__init__(f"flow {flow} is not served by any schedule")
        self.flow = flow


class FlowIdOutOfRange(ConfigError):
    def __init__(self, flow: int, num_flows: int):
        super().__init__(f"flow id {flow} out of range [0, {num_flows})")
        self.flow = flow
        self.num_flows = num_flows


class UnknownPreset(ConfigError):
    pass


class PresetTooLarge(ConfigError):
    pass


class InvalidHorizon(ConfigError):
    pass


class InstanceTooLarge(ConfigError):
    pass


class InvalidArrivalSpec(ConfigError):
    pass


class InvalidPolicy(ConfigError):
    pass


class ConfigMismatch(NetschedError):
    pass


class NoCompletedFiles(NetschedError):
    pass


class EmptyHistogram(NetschedError):
    pass


class TooFewCheckpoints(NetschedError):
    pass


class NotApplicable(NetschedError):
    pass


class SingularSystem(NetschedError):
    pass


class InfiniteMoment(NetschedError):
    def __init__(self, message: str, flow: Optional[int] = None):
        super().__init__(message)
        self.flow = flow


class RhoNotAdmissible(NetschedError):
    pass
