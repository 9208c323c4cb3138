"""File formats: trajectory text files, KVAF binary fields, P5 mask images,
JSON config, deterministic per-subsystem RNG streams, atomic writes."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (
    BadMagic,
    InvariantViolation,
    ParseError,
    TruncatedFile,
    VersionMismatch,
)
from .kinematics import ArticulatedState, CameraModel, Trajectory
from .kva_field import N_CHANNELS, KvaField

KVAF_MAGIC = b"KVAF"
KVAF_VERSION = 1


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def atomic_write_bytes(path, data: bytes):
    """Write-temp-then-rename so readers never observe partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def subsystem_rng(seed: int, tag: str) -> np.random.Generator:
    """Independent stream per (seed, subsystem tag); adding a consumer does
    not perturb the streams of others."""
    return np.random.default_rng([seed, zlib.crc32(tag.encode("utf-8"))])


# ---------------------------------------------------------------------------
# Trajectory text format


def write_trajectory(path, traj: Trajectory, cam: CameraModel, seq_id="seq"):
    lines = [f"seq {seq_id}"]
    lines.append("camera " + " ".join(
        _fmt(v) for v in (cam.fx, cam.fy, cam.cx, cam.cy)) +
        f" {cam.width} {cam.height}")
    ext = np.hstack([cam.rotation, cam.translation[:, None]]).reshape(-1)
    lines.append("extrinsic " + " ".join(_fmt(v) for v in ext))
    lines.append(f"dt {_fmt(traj.dt)}")
    for i, state in enumerate(traj.states, start=1):
        lines.append(f"frame {i} " + " ".join(_fmt(v) for v in state.as_vector()))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_trajectory(path):
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read().splitlines()

    seq_id = None
    cam_vals = None
    ext = None
    dt = None
    frames = {}
    for ln, line in enumerate(raw, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        key, rest = parts[0], parts[1:]
        try:
            if key == "seq":
                seq_id = " ".join(rest)
            elif key == "camera":
                if len(rest) != 6:
                    raise ParseError("camera line needs 6 values", line=ln)
                cam_vals = [float(v) for v in rest]
            elif key == "extrinsic":
                if len(rest) != 12:
                    raise ParseError("extrinsic line needs 12 values", line=ln)
                ext = np.array([float(v) for v in rest]).reshape(3, 4)
            elif key == "dt":
                if len(rest) != 1:
                    raise ParseError("dt line needs 1 value", line=ln)
                dt = float(rest[0])
            elif key == "frame":
                if len(rest) != 10:
                    raise ParseError("frame line needs index + 9 values", line=ln)
                idx = int(rest[0])
                vals = np.array([float(v) for v in rest[1:]])
                if not np.all(np.isfinite(vals)):
                    raise InvariantViolation(f"non-finite action at frame {idx}")
                frames[idx] = ArticulatedState.from_vector(vals)
            else:
                raise ParseError(f"unknown record {key!r}", line=ln)
        except ValueError as exc:
            raise ParseError(str(exc), line=ln) from exc

    if cam_vals is None or ext is None or dt is None or not frames:
        raise ParseError("missing camera/extrinsic/dt/frame records")
    expected = list(range(1, len(frames) + 1))
    if sorted(frames) != expected:
        raise InvariantViolation("frame indices must be contiguous from 1")
    if dt <= 0:
        raise InvariantViolation("dt must be > 0")

    fx, fy, cx, cy, width, height = cam_vals
    cam = CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=int(width),
                      height=int(height), rotation=ext[:, :3], translation=ext[:, 3])
    traj = Trajectory(states=tuple(frames[i] for i in expected), dt=dt)
    return traj, cam, seq_id


# ---------------------------------------------------------------------------
# KVAF binary field format


def write_field(field: KvaField, path):
    h, w = field.h, field.w
    header = KVAF_MAGIC + struct.pack("<5I", KVAF_VERSION, h, w, field.t, N_CHANNELS)
    payload = np.ascontiguousarray(
        np.moveaxis(field.channels, 2, 0), dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_field(path) -> KvaField:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != KVAF_MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    if len(data) < 24:
        raise TruncatedFile("header truncated")
    version, h, w, t, c = struct.unpack("<5I", data[4:24])
    if version != KVAF_VERSION:
        raise VersionMismatch(f"unsupported version {version}")
    expected = 24 + 4 * h * w * c
    if len(data) < expected:
        raise TruncatedFile(f"expected {expected} bytes, got {len(data)}")
    channels = np.frombuffer(data[24:expected], dtype="<f4").reshape(c, h, w)
    return KvaField(channels=np.moveaxis(channels, 0, 2).astype(float), t=t)


# ---------------------------------------------------------------------------
# P5 portable graymap masks


def write_pgm(path, labels: np.ndarray):
    labels = np.asarray(labels)
    h, w = labels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + labels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise BadMagic("not a P5 graymap")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval > 255:
        raise ParseError("only 8-bit graymaps supported")
    pixels = data[pos:pos + w * h]
    if len(pixels) < w * h:
        raise TruncatedFile("pixel data truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).astype(int)


# ---------------------------------------------------------------------------
# Config


@dataclass
class Config:
    """Run configuration; defaults match the constants used throughout."""

    resolution: tuple = (64, 64)
    stride: int = 4
    token_dim: int = 16
    top_k: int = 2
    dense_end: float = 0.40
    sparse_start: float = 0.75
    lam_kp: float = 0.01
    lam_src: float = 0.005
    lam_cp: float = 0.01
    lam_sub: float = 0.005
    ema_beta: float = 0.95
    rho_full: float = 0.2
    rho_light: float = 0.3
    refresh_intervals: tuple = (1, 2, 4)
    lam_b: float = 0.5
    lam_t: float = 0.35
    tube_half_width: float = 3.0
    trajectory_kind: str = "composite"
    frames: int = 10
    progress: float = 1.0
    timestep: float = 0.5


def load_config(path=None, overrides=None) -> Config:
    cfg = Config()
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    data.update(overrides or {})
    known = {f.name for f in dataclasses.fields(Config)}
    unknown = set(data) - known
    if unknown:
        raise ParseError(f"unknown config keys: {sorted(unknown)}")
    for key, value in data.items():
        if isinstance(getattr(cfg, key), tuple):
            value = tuple(value)
        setattr(cfg, key, value)
    return cfg
