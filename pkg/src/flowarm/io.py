"""Run-config JSON, eval-log CSV and the binary checkpoint container."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import struct
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import cflownets as cf
from . import env as reacher
from .buffer import ReplayBuffer
from .harness import Checkpoint, EvalRecord, RunManifest, Stage, TransferMode
from .nn import MLPParams

MAGIC = b"FLOWARM1"
_ACTIVATION_CODES = {"identity": 0, "softplus": 1}
_BUFFER_FIELDS = ("obs", "action", "reward", "next_obs", "done")


class ConfigError(ValueError):
    pass


# -- run configuration -----------------------------------------------------

def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if hasattr(value, "value") and not isinstance(value, (int, float, str)):
        return value.value
    return value


def _dataclass_to_dict(obj) -> dict:
    return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _dataclass_from_dict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**{k: _tupled(v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def manifest_to_dict(m: RunManifest) -> dict:
    return {
        "algorithm": m.algorithm,
        "stage": m.stage.value,
        "fault": m.fault.to_dict(),
        "seed": m.seed,
        "timestep_budget": m.timestep_budget,
        "eval_freq": m.eval_freq,
        "eval_episodes": m.eval_episodes,
        "transfer_mode": m.transfer_mode.value,
        "finetune_retrieval": m.finetune_retrieval,
        "arm": _dataclass_to_dict(m.arm),
        "cflownets": _dataclass_to_dict(m.cflownets),
        "baseline": _dataclass_to_dict(m.baseline),
    }


def manifest_from_dict(data: dict) -> RunManifest:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunManifest)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    kwargs = {k: v for k, v in data.items() if k not in ("fault", "arm", "cflownets", "baseline")}
    try:
        if "fault" in data:
            kwargs["fault"] = reacher.FaultSpec.from_dict(data["fault"])
        if "stage" in kwargs:
            kwargs["stage"] = Stage(kwargs["stage"])
        if "transfer_mode" in kwargs:
            kwargs["transfer_mode"] = TransferMode(kwargs["transfer_mode"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if "arm" in data:
        kwargs["arm"] = _dataclass_from_dict(reacher.ArmConfig, data["arm"], "arm")
    if "cflownets" in data:
        kwargs["cflownets"] = _dataclass_from_dict(cf.CFlowNetsConfig, data["cflownets"], "cflownets")
    if "baseline" in data:
        kwargs["baseline"] = _dataclass_from_dict(bl.BaselineConfig, data["baseline"], "baseline")
    try:
        return RunManifest(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def canonical_config(m: RunManifest) -> str:
    return json.dumps(manifest_to_dict(m), sort_keys=True, indent=2) + "\n"


def load_config(path) -> RunManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return manifest_from_dict(data)


def save_config(m: RunManifest, path):
    Path(path).write_text(canonical_config(m))


# -- eval logs -------------------------------------------------------------

def eval_log_to_csv(records, n_episodes: int | None = None) -> str:
    if n_episodes is None:
        n_episodes = len(records[0].returns) if records else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["timestep", "mean_return"] + [f"ep_return_{i}" for i in range(n_episodes)])
    last = None
    for r in records:
        if len(r.returns) != n_episodes:
            raise ValueError("every evaluation must have the same number of episodes")
        if last is not None and r.timestep <= last:
            raise ValueError("timesteps must be strictly increasing")
        last = r.timestep
        writer.writerow([str(int(r.timestep)), repr(r.mean_return)] + [repr(float(x)) for x in r.returns])
    return buf.getvalue()


def write_eval_log(records, path, n_episodes: int | None = None):
    Path(path).write_text(eval_log_to_csv(records, n_episodes))


def read_eval_log(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["timestep", "mean_return"]:
        raise ValueError(f"{path}: not an eval log")
    width = len(rows[0])
    out = []
    for row in rows[1:]:
        if len(row) != width:
            raise ValueError(f"{path}: ragged row")
        out.append(EvalRecord(int(row[0]), np.array([float(x) for x in row[2:]])))
    return out


# -- checkpoints -----------------------------------------------------------

def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def _unpack_array(view: memoryview, pos: int):
    (ndim,) = struct.unpack_from("<I", view, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}Q", view, pos)
    pos += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(view, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
    return arr, pos + 8 * count


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "algorithm": ckpt.algorithm,
        "manifest": ckpt.manifest,
        "train_seconds": ckpt.train_seconds,
        "pretrain_seconds": ckpt.pretrain_seconds,
        "meta": ckpt.meta,
        "networks": list(ckpt.networks),
        "has_buffer": ckpt.buffer is not None,
    }
    block = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<Q", len(block)), block, struct.pack("<I", len(ckpt.networks))]
    for name, params in ckpt.networks.items():
        raw = name.encode()
        arrays = params.arrays()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", _ACTIVATION_CODES[params.output_activation], len(arrays)))
        parts += [_pack_array(a) for a in arrays]
    if ckpt.buffer is None:
        parts.append(struct.pack("<B", 0))
    else:
        b = ckpt.buffer
        parts.append(struct.pack("<B5Q", 1, b.capacity, b.cursor, b.size, b.obs_dim, b.action_dim))
        parts += [_pack_array(getattr(b, k)) for k in _BUFFER_FIELDS]
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic bytes)")
    view = memoryview(data)
    (n,) = struct.unpack_from("<Q", view, 8)
    header = json.loads(bytes(view[16:16 + n]))
    pos = 16 + n
    (n_nets,) = struct.unpack_from("<I", view, pos)
    pos += 4
    codes = {v: k for k, v in _ACTIVATION_CODES.items()}
    networks = {}
    for _ in range(n_nets):
        (ln,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + ln]).decode()
        pos += ln
        code, n_arrays = struct.unpack_from("<BI", view, pos)
        pos += 5
        arrays = []
        for _ in range(n_arrays):
            a, pos = _unpack_array(view, pos)
            arrays.append(a)
        networks[name] = MLPParams.from_arrays(arrays, codes[code])
    (has_buffer,) = struct.unpack_from("<B", view, pos)
    pos += 1
    buffer = None
    if has_buffer:
        capacity, cursor, size, obs_dim, action_dim = struct.unpack_from("<5Q", view, pos)
        pos += 40
        buffer = ReplayBuffer(capacity, obs_dim, action_dim)
        for k in _BUFFER_FIELDS:
            a, pos = _unpack_array(view, pos)
            setattr(buffer, k, a)
        buffer.cursor, buffer.size = cursor, size
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint file")
    return Checkpoint(header["algorithm"], networks, buffer, header["manifest"],
                      header["train_seconds"], header["pretrain_seconds"], header["meta"])


def save_checkpoint(ckpt: Checkpoint, path):
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
