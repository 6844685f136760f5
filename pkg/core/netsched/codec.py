"""
codec.py

SimStats のバイナリフレーム化。
- msgpack でシリアライズし zlib で圧縮、4 バイト big-endian の長さヘッダを付与
- 1 ファイルに複数フレーム（レプリケーションごと）を連結して保存可能
- ワーカープロセスからの結果もこのフレームで受け渡す
"""

import logging
import zlib
from typing import Iterator, List

import msgpack
import numpy as np

from core.netsched.stats import Checkpoint, SimStats


def _get_logger() -> logging.Logger:
    logger = logging.getLogger(__name__)
    if not logger.hasHandlers():
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('[%(levelname)s] %(name)s: %(message)s'))
        logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return logger


logger = _get_logger()

COMPRESSION_LEVEL = 6       # zlib level (1-9)
HEADER_SIZE = 4             # big-endian payload length
FORMAT_VERSION = 1

_ARRAY_FIELDS = (
    "sum_q", "trunc_q", "sum_files", "file_arrivals", "files_completed", "sum_delay",
    "trunc_delay", "packets_arrived", "packets_served", "final_q",
)


def pack_and_compress(data) -> bytes:
    packed = msgpack.packb(data, use_bin_type=True)
    compressed = zlib.compress(packed, level=COMPRESSION_LEVEL)
    header = len(compressed).to_bytes(HEADER_SIZE, 'big')
    return header + compressed


def find_boundary(buf: bytes) -> int:
    """先頭フレームの終端位置。完全なフレームがなければ -1。"""
    if len(buf) < HEADER_SIZE:
        return -1
    length = int.from_bytes(buf[:HEADER_SIZE], 'big')
    end = HEADER_SIZE + length
    if len(buf) < end:
        return -1
    return end


def _to_plain(stats: SimStats) -> dict:
    out = {
        "v": FORMAT_VERSION,
        "fingerprint": stats.fingerprint,
        "num_flows": stats.num_flows,
        "exponents": list(stats.exponents),
        "truncations": list(stats.truncations),
        "slots": stats.slots,
        "sum_q_pow": stats.sum_q_pow.tolist(),
        "hist_q": [h.tolist() for h in stats.hist_q],
        "hist_arrival": [h.tolist() for h in stats.hist_arrival],
        "checkpoints": [[c.tag, c.slot, list(c.means)] for c in stats.checkpoints],
        "cycles": stats.cycles,
        "sum_cycle_len": stats.sum_cycle_len,
        "sum_cycle_len_sq": stats.sum_cycle_len_sq,
        "wasted_slots": stats.wasted_slots,
    }
    for name in _ARRAY_FIELDS:
        out[name] = getattr(stats, name).tolist()
    return out


def _from_plain(obj: dict) -> SimStats:
    if obj.get("v") != FORMAT_VERSION:
        raise ValueError(f"unsupported stats frame version: {obj.get('v')!r}")
    kwargs = {name: np.asarray(obj[name], dtype=np.int64) for name in _ARRAY_FIELDS}
    return SimStats(
        fingerprint=obj["fingerprint"],
        num_flows=int(obj["num_flows"]),
        exponents=tuple(float(e) for e in obj["exponents"]),
        truncations=tuple(int(m) for m in obj["truncations"]),
        slots=int(obj["slots"]),
        sum_q_pow=np.asarray(obj["sum_q_pow"], dtype=float).reshape(len(obj["exponents"]), obj["num_flows"]),
        hist_q=[np.asarray(h, dtype=np.int64) for h in obj["hist_q"]],
        hist_arrival=[np.asarray(h, dtype=np.int64) for h in obj["hist_arrival"]],
        checkpoints=[Checkpoint(int(t), int(s), tuple(float(x) for x in m)) for t, s, m in obj["checkpoints"]],
        cycles=int(obj["cycles"]),
        sum_cycle_len=int(obj["sum_cycle_len"]),
        sum_cycle_len_sq=int(obj["sum_cycle_len_sq"]),
        wasted_slots=int(obj["wasted_slots"]),
        **kwargs,
    )


def pack_stats(stats: SimStats) -> bytes:
    return pack_and_compress(_to_plain(stats))


def unpack_stats(frame: bytes) -> SimStats:
    """pack_stats の出力（ヘッダ付き 1 フレーム）を復元します。"""
    end = find_boundary(frame)
    if end < 0:
        logger.error("Truncated stats frame (%d bytes)", len(frame))
        raise ValueError("truncated stats frame")
    plain = zlib.decompress(frame[HEADER_SIZE:end])
    return _from_plain(msgpack.unpackb(plain, raw=False))


def iter_frames(buf: bytes) -> Iterator[SimStats]:
    pos = 0
    view = memoryview(buf)
    while pos < len(buf):
        end = find_boundary(view[pos:])
        if end < 0:
            logger.error("Trailing %d bytes do not form a complete frame", len(buf) - pos)
            raise ValueError("incomplete trailing frame")
        yield unpack_stats(bytes(view[pos:pos + end]))
        pos += end


def write_frames(path, items: List[SimStats]) -> None:
    with open(path, "wb") as fh:
        for s in items:
            fh.write(pack_stats(s))


def read_frames(path) -> List[SimStats]:
    with open(path, "rb") as fh:
        return list(iter_frames(fh.read()))
