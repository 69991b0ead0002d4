"""Binary named-tensor container used for checkpoints and embedding stores.

Layout (all integers little-endian)::

    b"C2DA" | version u32 | meta_len u32 | meta (UTF-8 config text)
    | count u32 | count x (name_len u16 | name | ndim u8 | dims u32 * ndim | f32 data)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_io
from .frontend import FeatureConfig
from .model import ModelConfig, SpeakerNet

MAGIC = b"C2DA"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


def is_container(path: str | Path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == MAGIC
    except OSError:
        return False


def write_entries(path: str | Path, entries: list[tuple[str, np.ndarray]], metadata: str = "") -> None:
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("entry names must be unique")
    meta = metadata.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"entry {name!r} cannot be encoded")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_entries(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Return ``(metadata, {name: float32 array})`` in file order."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{path}: truncated or corrupt checkpoint (needed {n} bytes at offset {pos})")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a C2DA checkpoint")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        metadata = bytes(take(meta_len)).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt metadata block") from exc
    (count,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt entry name") from exc
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
        if name in entries:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        entries[name] = data
    if pos != len(view):
        raise CheckpointError(f"{path}: {len(view) - pos} trailing bytes after last entry")
    return metadata, entries


@dataclass
class CheckpointInfo:
    model: ModelConfig
    features: FeatureConfig
    step: int = 0
    epoch: int = 0


def checkpoint_metadata(model_cfg: ModelConfig, feat_cfg: FeatureConfig, step: int = 0, epoch: int = 0) -> str:
    return config_io.dump_sections({
        "model": model_cfg.to_mapping(),
        "features": feat_cfg.to_mapping(),
        "state": {"step": step, "epoch": epoch},
    })


def parse_metadata(text: str, source: str = "checkpoint") -> CheckpointInfo:
    try:
        parser = config_io.parse_text(text, source)
        state = dict(parser.items("state")) if parser.has_section("state") else {}
        return CheckpointInfo(config_io.model_config(parser), config_io.feature_config(parser),
                              int(state.get("step", 0)), int(state.get("epoch", 0)))
    except (config_io.ConfigError, ValueError) as exc:
        raise CheckpointError(f"{source}: invalid metadata ({exc})") from exc


def save_checkpoint(model: SpeakerNet, path: str | Path, features: FeatureConfig = FeatureConfig(),
                    step: int = 0, epoch: int = 0) -> None:
    meta = checkpoint_metadata(model.config, features, step, epoch)
    write_entries(path, list(model.state_dict().items()), meta)


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> tuple[SpeakerNet, CheckpointInfo]:
    """Rebuild the model stored at ``path``.

    When ``expected`` is given the model is built from that config instead
    and every stored tensor must match it in shape.
    """
    metadata, entries = read_entries(path)
    info = parse_metadata(metadata, str(path))
    cfg = expected or info.model
    model = SpeakerNet(cfg)
    own = model.state_dict()
    for name, arr in own.items():
        if name not in entries:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if entries[name].shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: "
                                  f"stored {entries[name].shape}, model expects {arr.shape}")
    extra = [k for k in entries if k not in own]
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]!r}")
    model.load_state_dict(entries)
    model.eval()
    return model, info
