"""Image ingestion (binary PPM), dataset manifests and the checkpoint format.

Checkpoint layout, all integers little-endian u32::

    b"DTWN" | version=1 | meta_len | meta (UTF-8 JSON) | count |
    count x [name_len | name | rank | dims... | float32 LE payload] |
    CRC32 of every byte between the version word and the CRC

The metadata block carries the method tag and the flat run configuration so a
checkpoint alone is enough to rebuild its model.
"""
from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ChecksumError, LayoutError, ManifestError,
                     ParseError, VersionError)

MAGIC = b"DTWN"
VERSION = 1
MANIFEST_VERSION = 1
_WHITESPACE = b" \t\n\r\x0b\x0c"


# -------------------------------------------------------------------- images
def _parse_header(buf: bytes, magic: bytes, nfields: int) -> tuple[list[int], int]:
    if buf[:2] != magic:
        raise ParseError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0)
    pos, fields = 2, []
    while len(fields) < nfields:
        while pos < len(buf) and (buf[pos] in _WHITESPACE or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < len(buf) and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and 48 <= buf[pos] <= 57:
            pos += 1
        if start == pos:
            raise ParseError("malformed header: expected a decimal integer", pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise ParseError("malformed header: expected one whitespace byte before the payload", pos)
    return fields, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode an 8-bit binary PPM (P6) into a (3, H, W) float32 array in [0, 1]."""
    (width, height, maxval), pos = _parse_header(buf, b"P6", 3)
    if width < 1 or height < 1:
        raise ParseError(f"image dimensions must be positive, got {width}x{height}", pos)
    if not 0 < maxval < 256:
        raise ParseError(f"only 8-bit PPM is supported, maxval={maxval}", pos)
    need = width * height * 3
    if len(buf) - pos < need:
        raise ParseError(f"truncated payload: expected {need} bytes, found {len(buf) - pos}", len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    img = pixels.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float32)
    return img / np.float32(maxval)


def load_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    _, h, w = img.shape
    body = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + body.tobytes()


def save_image(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM (P5)."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (width, height, _), pos = _parse_header(buf, b"P5", 3)
    if len(buf) - pos < width * height:
        raise ParseError("truncated payload", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=width * height, offset=pos).reshape(height, width)


# ----------------------------------------------------------------- manifests
@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        self.root = Path(self.root)
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ManifestError("manifest paths must be unique")
        labels = {e.label for e in self.entries if e.label is not None}
        if labels and labels != set(range(len(labels))):
            raise ManifestError(f"labels must form a contiguous 0-based set, got {sorted(labels)}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labeled(self) -> bool:
        return bool(self.entries) and all(e.label is not None for e in self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if e.label is None else e.label for e in self.entries], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len({e.label for e in self.entries if e.label is not None})

    def paths(self) -> list[Path]:
        return [self.root / e.path for e in self.entries]


def _bytewise(names):
    return sorted(names, key=lambda s: s.encode("utf-8"))


def _read_label_rows(csv_path: Path) -> dict[str, int]:
    rows = {}
    with open(csv_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            if len(row) < 2:
                raise ManifestError(f"{csv_path}:{lineno}: expected 'path,label'")
            name, label = row[0].strip(), row[1].strip()
            if lineno == 1 and not label.lstrip("-").isdigit():
                continue  # header
            try:
                rows[name] = int(label)
            except ValueError as exc:
                raise ManifestError(f"{csv_path}:{lineno}: label {label!r} is not an integer") from exc
    return rows


def build_manifest(directory, labels_csv=None) -> DatasetManifest:
    """Manifest of the ``*.ppm`` files in ``directory``, bytewise sorted.

    With ``labels_csv`` (rows ``filename,label``) labels are joined by file
    name; every file the CSV names must exist.
    """
    root = Path(directory)
    if not root.is_dir():
        raise ManifestError(f"dataset directory {root} does not exist")
    names = _bytewise(p.name for p in root.iterdir() if p.is_file() and p.suffix.lower() == ".ppm")
    labels: dict[str, int] = {}
    if labels_csv is not None:
        labels = _read_label_rows(Path(labels_csv))
        missing = _bytewise(set(labels) - set(names))
        if missing:
            raise ManifestError(f"label file references missing images: {', '.join(missing)}")
    return DatasetManifest(root, [ManifestEntry(n, labels.get(n)) for n in names])


def read_manifest(csv_path) -> DatasetManifest:
    """Read a ``path,label`` manifest; paths are relative to the CSV's folder."""
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise ManifestError(f"manifest {csv_path} does not exist")
    entries = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "path":
            raise ManifestError(f"{csv_path}: expected header 'path,label'")
        for row in reader:
            if not row or not row[0].strip():
                continue
            label = row[1].strip() if len(row) > 1 else ""
            entries.append(ManifestEntry(row[0].strip(), int(label) if label else None))
    manifest = DatasetManifest(csv_path.parent, entries)
    for p in manifest.paths():
        if not p.is_file():
            raise ManifestError(f"manifest references missing image {p}")
    return manifest


def write_manifest(manifest: DatasetManifest, csv_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        for e in manifest.entries:
            writer.writerow([e.path, "" if e.label is None else e.label])


def resolve_dataset(path) -> DatasetManifest:
    """A directory (with optional ``labels.csv``) or a manifest CSV file."""
    path = Path(path)
    if path.is_dir():
        labels = path / "labels.csv"
        return build_manifest(path, labels if labels.is_file() else None)
    return read_manifest(path)


def load_images(manifest: DatasetManifest) -> list[np.ndarray]:
    return [load_image(p) for p in manifest.paths()]


# --------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    method: str
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"method": ckpt.method, "config": ckpt.config}, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value, dtype="<f4")  # tobytes() below is C-order; keeps 0-d shapes
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return MAGIC + struct.pack("<I", VERSION) + body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise LayoutError(f"record runs past the end of the payload at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {buf[:4]!r}")
    if len(buf) < 12:
        raise LayoutError(f"checkpoint is only {len(buf)} bytes long")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body_end = len(buf) - 4
    stored = struct.unpack("<I", buf[body_end:])[0]
    if zlib.crc32(buf[8:body_end]) != stored:
        raise ChecksumError("checkpoint payload CRC32 mismatch")
    r = _Reader(buf, 8, body_end)
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dims = [r.u32() for _ in range(r.u32())]
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * count)
        if name in tensors:
            raise LayoutError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != body_end:
        raise LayoutError(f"{body_end - r.pos} unexpected trailing bytes before the CRC")
    return Checkpoint(meta["method"], meta["config"], tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temp file in the target folder, then rename."""
    path = Path(path)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
