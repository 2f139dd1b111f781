"""On-disk formats: images, image directories, checkpoints and run configs.

Image formats
    * 16-bit binary PGM (``P5``, maxval 65535, big-endian samples as Netpbm
      requires); values are scaled to [0, 1] on read.
    * ``BHIMG01``: the 7 magic bytes, height and width as little-endian
      uint32, then ``H*W`` little-endian float64 values row-major.  Lossless.

Checkpoint (``BHFLOW01``)
    8-byte magic, six little-endian int32 (levels, steps_per_level,
    coupling_hidden_width, coupling_hidden_layers, input_height,
    input_width), uint64 parameter count, the float64 parameters, and a
    trailing uint32 CRC-32 of every preceding byte.
"""

import dataclasses
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import (ChecksumError, ConfigError, DataError, FileFormatError, TruncatedFileError,
                     VersionError)
from .flow import FlowArchitecture, FlowModel
from .harmonize import HarmonizeConfig
from .numeric import as_image, minmax_normalize
from .train import TargetDataset, TrainConfig

IMG_MAGIC = b"BHIMG01"
CKPT_MAGIC = b"BHFLOW01"
PGM_MAXVAL = 65535
MAX_PIXELS = 1 << 28
IMAGE_SUFFIXES = (".pgm", ".bhimg")


def atomic_write_bytes(path, payload):
    """Write to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# -- images ------------------------------------------------------------------


def _check_dims(h, w, path):
    if h < 1 or w < 1 or h * w > MAX_PIXELS:
        raise FileFormatError(f"{path}: unsupported image dimensions {h}x{w}")


def _decode_float(data, path):
    if len(data) < 15:
        raise TruncatedFileError(len(data), path)
    h, w = struct.unpack_from("<II", data, 7)
    _check_dims(h, w, path)
    need = 15 + 8 * h * w
    if len(data) < need:
        raise TruncatedFileError(len(data), path)
    if len(data) > need:
        raise FileFormatError(f"{path}: {len(data) - need} trailing bytes")
    return np.frombuffer(data, dtype="<f8", count=h * w, offset=15).reshape(h, w).astype(np.float64)


def _pgm_tokens(data, count, path):
    """Read ``count`` whitespace-separated header tokens, honoring comments."""
    tokens = []
    i = 2
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise TruncatedFileError(i, path)
        start = i
        while i < n and not data[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise TruncatedFileError(i, path)
        tok = data[start:i]
        if not tok.isdigit():
            raise FileFormatError(f"{path}: bad PGM header token {tok!r}")
        tokens.append(int(tok))
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def _decode_pgm(data, path):
    (w, h, maxval), start = _pgm_tokens(data, 3, path)
    if maxval != PGM_MAXVAL:
        raise FileFormatError(f"{path}: PGM maxval must be {PGM_MAXVAL}, got {maxval}")
    _check_dims(h, w, path)
    need = start + 2 * h * w
    if len(data) < need:
        raise TruncatedFileError(len(data), path)
    raw = np.frombuffer(data, dtype=">u2", count=h * w, offset=start)
    return raw.reshape(h, w).astype(np.float64) / PGM_MAXVAL


def decode_image(data, path="<bytes>"):
    if data.startswith(IMG_MAGIC):
        return _decode_float(data, path)
    if data[:2] == b"P5":
        return _decode_pgm(data, path)
    if len(data) < 2:
        raise TruncatedFileError(len(data), path)
    raise FileFormatError(f"{path}: unrecognized image magic {data[:7]!r}")


def encode_image(img, fmt="float"):
    img = as_image(img)
    h, w = img.shape
    if fmt == "float":
        return IMG_MAGIC + struct.pack("<II", h, w) + img.astype("<f8").tobytes()
    if fmt == "pgm":
        q = np.round(np.clip(img, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
        return f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii") + q.tobytes()
    raise ValueError(f"unknown image format {fmt!r}")


def read_image(path):
    return decode_image(Path(path).read_bytes(), str(path))


def write_image(path, img):
    """Write ``img``; ``.pgm`` paths get 16-bit PGM, anything else the float format."""
    fmt = "pgm" if str(path).lower().endswith(".pgm") else "float"
    atomic_write_bytes(path, encode_image(img, fmt))


def list_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(directory, normalize=True):
    """Read every image in ``directory`` (sorted by name) into a :class:`TargetDataset`."""
    paths = list_images(directory)
    if not paths:
        raise DataError(f"no image files in {directory}")
    images = []
    first_shape = None
    for p in paths:
        img = read_image(p)
        if first_shape is None:
            first_shape = (img.shape, p)
        elif img.shape != first_shape[0]:
            raise DataError(
                f"dimension conflict: {first_shape[1].name} is {first_shape[0][0]}x{first_shape[0][1]} "
                f"but {p.name} is {img.shape[0]}x{img.shape[1]}"
            )
        images.append(minmax_normalize(img) if normalize else img)
    return TargetDataset(np.stack(images), names=[p.name for p in paths])


# -- checkpoints -------------------------------------------------------------

_ARCH_FIELDS = ("levels", "steps_per_level", "coupling_hidden_width", "coupling_hidden_layers",
                "input_height", "input_width")
_HEADER = struct.Struct("<8s6iQ")


def encode_checkpoint(model):
    a = model.arch
    head = _HEADER.pack(CKPT_MAGIC, *(getattr(a, f) for f in _ARCH_FIELDS), model.params.size)
    body = head + model.params.astype("<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data, path="<bytes>"):
    if len(data) < 8:
        raise TruncatedFileError(len(data), path)
    magic = data[:8]
    if magic != CKPT_MAGIC:
        if magic[:6] == CKPT_MAGIC[:6]:
            raise VersionError(f"{path}: unsupported checkpoint version {magic!r}, expected {CKPT_MAGIC!r}")
        raise FileFormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if len(data) < _HEADER.size + 4:
        raise TruncatedFileError(len(data), path)
    stored_crc, = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumError(f"{path}: CRC-32 mismatch, checkpoint is corrupted")
    fields = _HEADER.unpack_from(data, 0)
    try:
        arch = FlowArchitecture(**dict(zip(_ARCH_FIELDS, fields[1:7])))
    except ConfigError as exc:
        raise FileFormatError(f"{path}: invalid architecture descriptor: {exc}") from None
    count = fields[7]
    expected = FlowModel.parameter_count(arch)
    if count != expected:
        raise FileFormatError(f"{path}: parameter count {count} does not match architecture ({expected})")
    if len(data) != _HEADER.size + 8 * count + 4:
        raise FileFormatError(f"{path}: payload size does not match parameter count {count}")
    params = np.frombuffer(data, dtype="<f8", count=count, offset=_HEADER.size).astype(np.float64)
    return FlowModel(arch, params, actnorm_initialized=True)


def save_checkpoint(model, path):
    atomic_write_bytes(path, encode_checkpoint(model))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), str(path))


# -- run configuration -------------------------------------------------------

_ARCH_KEYS = {f.name: f.type for f in dataclasses.fields(FlowArchitecture)}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_HARM_KEYS = {"alpha": float, "beta1": float, "beta2": float, "iterations": int,
              "mask_quantile": float, "init_mode": str, "output_policy": str}
_PATH_KEYS = ("data_dir", "source_dir", "target_dir", "mean_image", "checkpoint")
_MISC_KEYS = {"ssimh_cutoff_radius": float}


def _coerce(key, raw, kind, lineno):
    try:
        if kind in (int, "int"):
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {getattr(kind, '__name__', kind)}, got {raw!r}") from None


@dataclasses.dataclass
class RunConfig:
    arch_values: dict = dataclasses.field(default_factory=dict)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    harmonize: HarmonizeConfig = dataclasses.field(default_factory=HarmonizeConfig)
    paths: dict = dataclasses.field(default_factory=dict)
    ssimh_cutoff_radius: float = 4.0

    def architecture(self, height=None, width=None):
        """Architecture from the file; missing input dimensions come from the data."""
        values = dict(self.arch_values)
        if height is not None:
            values.setdefault("input_height", height)
        if width is not None:
            values.setdefault("input_width", width)
        return FlowArchitecture(**values)


def parse_run_config(text):
    seen = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in _ARCH_KEYS:
            seen[key] = ("arch", _coerce(key, raw, _ARCH_KEYS[key], lineno))
        elif key in _TRAIN_KEYS:
            seen[key] = ("train", _coerce(key, raw, _TRAIN_KEYS[key], lineno))
        elif key in _HARM_KEYS:
            seen[key] = ("harm", _coerce(key, raw, _HARM_KEYS[key], lineno))
        elif key in _PATH_KEYS:
            seen[key] = ("path", raw)
        elif key in _MISC_KEYS:
            seen[key] = ("misc", _coerce(key, raw, _MISC_KEYS[key], lineno))
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    group = lambda g: {k: v for k, (gg, v) in seen.items() if gg == g}  # noqa: E731
    cfg = RunConfig(
        arch_values=group("arch"),
        train=TrainConfig(**group("train")),
        harmonize=HarmonizeConfig(**group("harm")),
        paths=group("path"),
        **group("misc"),
    )
    if "input_height" in cfg.arch_values and "input_width" in cfg.arch_values:
        cfg.architecture()
    return cfg


def read_run_config(path):
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def format_run_config(cfg):
    """Inverse of :func:`parse_run_config` for the explicitly set values."""
    lines = []
    for k, v in cfg.arch_values.items():
        lines.append(f"{k} = {v}")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.name} = {getattr(cfg.train, f.name)!r}")
    for k in _HARM_KEYS:
        lines.append(f"{k} = {getattr(cfg.harmonize, k)}")
    for k, v in cfg.paths.items():
        lines.append(f"{k} = {v}")
    lines.append(f"ssimh_cutoff_radius = {cfg.ssimh_cutoff_radius!r}")
    return "\n".join(lines) + "\n"

