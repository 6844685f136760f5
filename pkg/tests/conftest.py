import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pytest

# Add project paths if needed
ROOT = Path(__file__).resolve().parent.parent
for p in (ROOT, ROOT / "scripts"):
    if str(p) not in sys.path:
        sys.path.append(str(p))

from core.netsched import arrivals as arr
from core.netsched.model import preset


@pytest.fixture
def fig1():
    return preset("fig1")


@pytest.fixture
def fig3():
    return preset("fig3")


@pytest.fixture
def parallel2():
    spec, _ = preset("parallel(2)")
    return spec


@pytest.fixture
def light_pair():
    return (arr.bernoulli(0.3), arr.bernoulli(0.3))


@pytest.fixture
def thread_executor():
    # ワーカープロセスを起動しないテスト用の Executor
    with ThreadPoolExecutor(max_workers=2) as ex:
        yield ex


@pytest.fixture(autouse=True)
def _no_thread_env(monkeypatch):
    monkeypatch.delenv("MWSCHED_THREADS", raising=False)
