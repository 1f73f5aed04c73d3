"""File formats: MTSR tensors, JSONL manifests, checkpoints, WAV input, synthetic data.

MTSR layout (little-endian)::

    b"MTSR" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u64 extents | payload

Checkpoint layout::

    b"MCKP" | u8 version=1 | u64 header length | UTF-8 JSON header | MTSR blocks

The header carries the schedule, optional training config, ``tensor_count`` and
a directory of ``{name, offset, length}`` entries with offsets relative to the
first byte after the header.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, FormatError, InputError
from .schedule import StageSchedule

MTSR_MAGIC = b"MTSR"
MTSR_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# MTSR


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"MTSR stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("too many dimensions for MTSR")
    code = _DTYPE_CODES[arr.dtype]
    head = MTSR_MAGIC + struct.pack("<BBB", MTSR_VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one MTSR block starting at ``offset``; return the array and the end offset."""
    pos = offset
    if len(buf) - pos < 7:
        raise FormatError(f"truncated MTSR header at byte {pos}: need 7 bytes, have {len(buf) - pos}")
    if buf[pos:pos + 4] != MTSR_MAGIC:
        raise FormatError(f"bad MTSR magic {bytes(buf[pos:pos + 4])!r} at byte {pos}")
    version, code, ndim = struct.unpack_from("<BBB", buf, pos + 4)
    if version != MTSR_VERSION:
        raise FormatError(f"unsupported MTSR version {version} at byte {pos + 4}")
    if code not in _DTYPES:
        raise FormatError(f"unknown MTSR dtype code {code} at byte {pos + 5}")
    pos += 7
    if len(buf) - pos < 8 * ndim:
        raise FormatError(f"truncated MTSR extents at byte {pos}: need {8 * ndim} bytes, have {len(buf) - pos}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = _DTYPES[code]
    n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < n_bytes:
        raise FormatError(
            f"truncated MTSR payload at byte {pos}: expected {n_bytes} bytes, found {len(buf) - pos}"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=n_bytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + n_bytes


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after MTSR payload at byte {end}")
    return arr


# ---------------------------------------------------------------------------
# WAV


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM WAV as float64 mono in [-1, 1); channels are averaged."""
    try:
        with wave.open(str(path), "rb") as w:
            width = w.getsampwidth()
            channels = w.getnchannels()
            rate = w.getframerate()
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if width != 2:
        raise FormatError(f"{path}: only 16-bit PCM is supported, got {8 * width}-bit")
    data = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    data = data.reshape(-1, channels).mean(axis=1)
    return data, rate


def write_wav(path, samples, sample_rate: int = 16000, channels: int = 1) -> None:
    """Write float samples in [-1, 1] (``frames`` or ``frames x channels``) as 16-bit PCM."""
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: Path
    labels: list[int]
    labels2: list[int] | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, head_sizes) -> None:
        """Check every label against its head size and every file for existence."""
        head_sizes = tuple(head_sizes)
        for i, e in enumerate(self.entries):
            if not e.path.exists():
                raise InputError(f"manifest entry {i}: missing file {e.path}")
            groups = [e.labels] + ([e.labels2] if e.labels2 is not None else [])
            if len(groups) > len(head_sizes):
                raise InputError(f"manifest entry {i} has {len(groups)} label groups but the schedule has {len(head_sizes)} heads")
            if len(head_sizes) > 1 and e.labels2 is None:
                raise InputError(f"manifest entry {i} lacks labels2 for the second head")
            for j, (labels, size) in enumerate(zip(groups, head_sizes)):
                if not labels:
                    raise InputError(f"manifest entry {i}: empty label list for head {j}")
                bad = [c for c in labels if not 0 <= c < size]
                if bad:
                    raise InputError(f"manifest entry {i}: labels {bad} out of range for head {j} with {size} classes")

    def load_arrays(self) -> np.ndarray:
        return np.stack([read_tensor(e.path) for e in self.entries]).astype(np.float32)


def _int_list(v, where: str) -> list[int]:
    if isinstance(v, int):
        return [v]
    if not isinstance(v, list) or not all(isinstance(c, int) for c in v):
        raise FormatError(f"{where}: labels must be an int or a list of ints")
    return list(v)


def read_manifest(path) -> Manifest:
    """JSONL, one ``{"path", "labels", "labels2"?}`` object per line; paths resolve against the file."""
    path = Path(path)
    base = path.parent
    entries = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{n}: invalid JSON ({exc})") from exc
        if "path" not in doc or "labels" not in doc:
            raise FormatError(f"{path}:{n}: entries need 'path' and 'labels'")
        labels2 = _int_list(doc["labels2"], f"{path}:{n}") if doc.get("labels2") is not None else None
        p = Path(doc["path"])
        entries.append(ManifestEntry(p if p.is_absolute() else base / p, _int_list(doc["labels"], f"{path}:{n}"), labels2))
    return Manifest(entries)


def write_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    lines = []
    for e in manifest.entries:
        try:
            rel = e.path.relative_to(path.parent)
        except ValueError:
            rel = e.path
        doc = {"path": str(rel), "labels": list(e.labels)}
        if e.labels2 is not None:
            doc["labels2"] = list(e.labels2)
        lines.append(json.dumps(doc))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic data


def synth_spectrogram(label: int, n_classes: int, shape, rng: np.random.Generator, pattern: np.ndarray) -> np.ndarray:
    h, t = shape
    band = (label % h) if n_classes > h else int((label + 0.5) * h / n_classes)
    rows = np.arange(h)
    width = max(1.0, h / (4.0 * min(n_classes, h)))
    profile = np.exp(-0.5 * ((rows - band) / width) ** 2)
    segments = len(pattern)
    shift = int(rng.integers(0, max(1, t // (4 * segments)) + 1))
    envelope = np.repeat(pattern, int(np.ceil(t / segments)))[:t]
    envelope = np.roll(envelope, shift)
    gain = 3.0 * (0.8 + 0.4 * rng.random())
    noise = rng.standard_normal((h, t))
    return (noise + gain * profile[:, None] * envelope[None, :]).astype(np.float32)


def class_patterns(n_classes: int, seed: int, segments: int = 8) -> np.ndarray:
    """Distinct on/off temporal patterns, one row per class, each with at least two "on" segments."""
    rng = np.random.default_rng([seed, 0x5EED])
    patterns, seen = [], set()
    while len(patterns) < n_classes:
        p = (rng.random(segments) < 0.5).astype(np.float64)
        key = p.tobytes()
        if p.sum() < 2 or (key in seen and len(seen) < 2**segments - segments - 1):
            continue
        seen.add(key)
        patterns.append(p)
    return np.array(patterns)


def synth_dataset(out_dir, n_samples: int, n_classes: int, seed: int = 0, shape=(32, 128)) -> Path:
    """Write a balanced, class-conditional spectrogram set and return its manifest path.

    Class ``c`` puts a Gaussian band of energy at mel row ``c mod h`` (spread
    over the rows when there are fewer classes than rows) switched on and off
    by a class-specific temporal pattern, on top of unit white noise.
    """
    if n_samples < 1 or n_classes < 1:
        raise InputError("need at least one sample and one class")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    patterns = class_patterns(n_classes, seed)
    entries = []
    for i in range(n_samples):
        label = i % n_classes
        arr = synth_spectrogram(label, n_classes, shape, rng, patterns[label])
        p = out / f"sample_{i:05d}.mtsr"
        write_tensor(p, arr)
        entries.append(ManifestEntry(p, [label]))
    manifest_path = out / "manifest.jsonl"
    write_manifest(manifest_path, Manifest(entries))
    return manifest_path


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    schedule: StageSchedule
    tensors: dict[str, np.ndarray]
    train_config: dict | None = None
    format_version: int = CKPT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blobs, directory, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        blob = encode_tensor(np.asarray(arr))
        directory.append({"name": name, "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": ckpt.format_version,
        "schedule": ckpt.schedule.to_dict(),
        "train_config": ckpt.train_config,
        "tensor_count": len(directory),
        "tensors": directory,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<BQ", CKPT_VERSION, len(head)))
        f.write(head)
        for blob in blobs:
            f.write(blob)


def _check_names(tensors: dict[str, np.ndarray], schedule: StageSchedule) -> None:
    from .model import param_shapes

    expected = param_shapes(schedule)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    wrong = sorted(
        f"{k} {tuple(tensors[k].shape)}!={expected[k]}"
        for k in set(expected) & set(tensors)
        if tuple(tensors[k].shape) != expected[k]
    )
    if missing or extra or wrong:
        raise CheckpointError(
            f"checkpoint does not fit schedule {schedule.name!r}: "
            f"missing={missing} extra={extra} wrong_shape={wrong}"
        )


def load_checkpoint(path, schedule: StageSchedule | None = None) -> Checkpoint:
    """Read a checkpoint; with ``schedule`` its tensor names and shapes must match it exactly."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at byte 0")
    if len(buf) < 13:
        raise FormatError("truncated checkpoint preamble at byte 4")
    version, head_len = struct.unpack_from("<BQ", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    start = 13
    if len(buf) < start + head_len:
        raise FormatError(f"truncated checkpoint header at byte {start}: expected {head_len} bytes")
    try:
        header = json.loads(buf[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header at byte {start} is not JSON: {exc}") from exc
    directory = header.get("tensors", [])
    if header.get("tensor_count") != len(directory):
        raise FormatError(
            f"checkpoint header declares {header.get('tensor_count')} tensors but its directory lists {len(directory)}"
        )
    base = start + head_len
    tensors = {}
    for entry in directory:
        arr, end = decode_tensor(buf, base + entry["offset"])
        if end - base - entry["offset"] != entry["length"]:
            raise FormatError(f"tensor {entry['name']!r} length mismatch at byte {base + entry['offset']}")
        tensors[entry["name"]] = arr
    try:
        stored = StageSchedule.from_dict(header["schedule"])
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"checkpoint schedule is malformed: {exc}") from exc
    _check_names(tensors, schedule or stored)
    return Checkpoint(stored, tensors, header.get("train_config"), header.get("format_version", CKPT_VERSION))


def params_to_checkpoint(params, train_config: dict | None = None) -> Checkpoint:
    return Checkpoint(params.schedule, {k: v.data for k, v in params.items()}, train_config)


def checkpoint_to_params(ckpt: Checkpoint):
    from .model import ModelParams
    from .numerics import Tensor

    return ModelParams(ckpt.schedule, {k: Tensor(v, requires_grad=True) for k, v in ckpt.tensors.items()})
