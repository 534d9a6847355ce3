"""File formats: binary checkpoints, JSON Lines replays, CSV metrics.

Checkpoint layout (all integers little-endian):

    magic   b"PPRB"
    u8      format version (currently 1)
    u32     metadata length; that many bytes of UTF-8 JSON
    u32     crc32 of the metadata bytes
    u32     tensor count
    per tensor, sorted by name:
        u16   name length + that many bytes of UTF-8 name
        u8    dtype code (0 = float64, 1 = float32)
        u8    rank, then u32 per dimension
        u64   payload byte count
        u32   crc32 of the payload
        raw   little-endian values

Round-trips are bit-exact for float64 tensors; float32 is an opt-in
downcast flagged in the metadata. Every block is checksummed so a single
flipped byte is detected at load.
"""

import csv
import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (CompatibilityError, DataError, IntegrityError,
                     UsageError)

MAGIC = b"PPRB"
FORMAT_VERSION = 1
REPLAY_SCHEMA = 1

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


# -- checkpoints ------------------------------------------------------------------


@dataclass
class CheckpointData:
    meta: dict
    arrays: dict


def save_checkpoint(path, arrays: dict, meta: dict,
                    downcast_f32: bool = False) -> None:
    meta = dict(meta)
    meta["float32"] = bool(downcast_f32)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", zlib.crc32(meta_bytes)))
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if not np.issubdtype(arr.dtype, np.floating):
            raise UsageError(f"tensor {name!r} is not floating point")
        arr = arr.astype("<f4" if downcast_f32 else "<f8")
        raw = np.ascontiguousarray(arr).tobytes()
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(struct.pack("<I", zlib.crc32(raw)))
        buf.write(raw)
    body = buf.getvalue()
    # whole-file checksum footer: crc32 catches any single-byte change,
    # including ones the per-section checksums cannot see (tensor names,
    # the format version byte)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"{self.path}: truncated checkpoint "
                            f"(wanted {n} bytes at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path) -> CheckpointData:
    if not Path(path).is_file():
        raise DataError(f"{path}: no such checkpoint file")
    full = Path(path).read_bytes()
    if len(full) < 9:
        raise DataError(f"{path}: truncated checkpoint ({len(full)} bytes)")
    if full[:4] != MAGIC:
        raise CompatibilityError(f"{path}: not a checkpoint (bad magic)")
    if full[4] > FORMAT_VERSION:
        raise CompatibilityError(
            f"{path}: checkpoint format {full[4]} is newer than supported "
            f"{FORMAT_VERSION}")
    blob, footer = full[:-4], full[-4:]
    r = _Reader(blob, path)
    r.take(4)
    r.unpack("<B")
    meta_len = r.unpack("<I")
    meta_bytes = r.take(meta_len)
    meta_crc = r.unpack("<I")
    if zlib.crc32(meta_bytes) != meta_crc:
        raise IntegrityError(f"{path}: metadata checksum mismatch")
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable metadata: {e}") from e
    count = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name_len = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(f"{path}: unreadable tensor name: {e}") from e
        code = r.unpack("<B")
        if code not in _CODE_DTYPES:
            raise DataError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(ndim))
        nbytes = r.unpack("<Q")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise DataError(f"{path}: tensor {name!r} shape {shape} implies "
                            f"{expected} bytes, table says {nbytes}")
        crc = r.unpack("<I")
        raw = r.take(nbytes)
        if zlib.crc32(raw) != crc:
            raise IntegrityError(f"{path}: tensor {name!r} payload checksum mismatch")
        if name in arrays:
            raise DataError(f"{path}: duplicate tensor name {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if r.pos != len(blob):
        raise DataError(f"{path}: {len(blob) - r.pos} trailing bytes after "
                        "tensor table")
    if zlib.crc32(blob) != struct.unpack("<I", footer)[0]:
        raise IntegrityError(f"{path}: file checksum mismatch")
    return CheckpointData(meta=meta, arrays=arrays)


def check_env_hash(meta: dict, env_config) -> None:
    """Guard for load-for-training and cross-version replays."""
    want = env_config.content_hash()
    got = meta.get("env_config_hash")
    if got != want:
        raise CompatibilityError(
            f"checkpoint env config hash {got!r} does not match {want!r}")


# -- replays -----------------------------------------------------------------------


@dataclass
class FrameRecord:
    frame: int
    digest: str
    action: int
    reward: float
    events: dict
    probes: dict | None = None
    win_prob: float | None = None
    obs_vector: list | None = None
    obs_type_ids: list | None = None


@dataclass
class Replay:
    header: dict
    frames: list


class ReplayWriter:
    """Single-writer JSON Lines replay. Header first, then one frame per
    line with strictly increasing frame indices."""

    def __init__(self, path, env_config, seed, model_version: int,
                 full_obs: bool = False, extra: dict | None = None):
        self.path = Path(path)
        self.full_obs = full_obs
        self._last_frame = -1
        header = {
            "schema": REPLAY_SCHEMA,
            "kind": "replay",
            "env_config": env_config.to_dict(),
            "env_config_hash": env_config.content_hash(),
            "seed": seed,
            "model_version": model_version,
            "full_obs": full_obs,
        }
        if extra:
            header.update(extra)
        self._fh = self.path.open("w", encoding="utf-8")
        self._fh.write(json.dumps(header, sort_keys=True) + "\n")

    def append_frame(self, frame: int, observation, action: int, reward: float,
                     events, probes: dict | None = None,
                     win_prob: float | None = None) -> None:
        if frame <= self._last_frame:
            raise UsageError(f"frame {frame} not after {self._last_frame}")
        self._last_frame = frame
        rec = {
            "frame": frame,
            "digest": observation.digest(),
            "action": int(action),
            "reward": float(reward),
            "events": events.to_dict(),
        }
        if probes is not None:
            rec["probes"] = {k: float(v) for k, v in sorted(probes.items())}
        if win_prob is not None:
            rec["win_prob"] = float(win_prob)
        if self.full_obs:
            rec["obs"] = {
                "vector": observation.vector.tolist(),
                "type_ids": observation.type_ids.tolist(),
            }
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def load_replay(path) -> Replay:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such replay file")
    frames = []
    header = None
    last = -1
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: malformed JSON at line {lineno}: {e}") from e
            if lineno == 1:
                if rec.get("kind") != "replay" or "schema" not in rec:
                    raise DataError(f"{path}: line 1 is not a replay header")
                if rec["schema"] > REPLAY_SCHEMA:
                    raise CompatibilityError(
                        f"{path}: replay schema {rec['schema']} newer than "
                        f"supported {REPLAY_SCHEMA}")
                header = rec
                continue
            missing = {"frame", "digest", "action", "reward", "events"} - set(rec)
            if missing:
                raise DataError(f"{path}: line {lineno} missing fields "
                                f"{sorted(missing)}")
            if rec["frame"] <= last:
                raise DataError(f"{path}: line {lineno}: frame {rec['frame']} "
                                f"not after {last}")
            last = rec["frame"]
            obs = rec.get("obs") or {}
            frames.append(FrameRecord(
                frame=rec["frame"], digest=rec["digest"], action=rec["action"],
                reward=rec["reward"], events=rec["events"],
                probes=rec.get("probes"), win_prob=rec.get("win_prob"),
                obs_vector=obs.get("vector"), obs_type_ids=obs.get("type_ids")))
    if header is None:
        raise DataError(f"{path}: empty replay (no header line)")
    return Replay(header=header, frames=frames)


# -- tabular output ------------------------------------------------------------------


def write_csv(path, rows: list, fieldnames: list) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_csv(path) -> list:
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
