"""Episode, dataset and checkpoint files.

Binary blobs share one layout: an 8-byte ASCII magic, two little-endian
uint32 dimension fields (rows, cols), then a row-major little-endian float
payload. Episode blobs (magic ``MMGEMB01``) hold float32; checkpoint records
(magic ``MMGCKPT1``) hold float64 so parameters survive a round trip exactly.
Manifests are UTF-8 JSON with sorted keys.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from mmgraph.embeddings import Episode

EPISODE_MAGIC = b"MMGEMB01"
CHECKPOINT_MAGIC = b"MMGCKPT1"
HEADER = struct.Struct("<8sII")
EPISODE_FORMAT = "mmgraph-episode/1"
DATASET_FORMAT = "mmgraph-dataset/1"
CHECKPOINT_FORMAT = "mmgraph-checkpoint/1"

_DTYPES = {EPISODE_MAGIC: np.dtype("<f4"), CHECKPOINT_MAGIC: np.dtype("<f8")}


class FormatError(ValueError):
    """Base class for malformed or inconsistent files."""


class MissingFileError(FormatError, FileNotFoundError):
    pass


class HeaderMismatchError(FormatError):
    """Blob header disagrees with its magic or with the manifest."""


class BlobLengthError(FormatError):
    """Blob payload is shorter or longer than its header declares."""


class IndexRangeError(FormatError):
    """A region or alignment index points outside the episode."""


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_text(path: Path, text: str) -> None:
    Path(path).write_bytes(text.encode("utf-8"))


def read_json(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def encode_matrix(matrix: np.ndarray, magic: bytes = EPISODE_MAGIC) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"blob payload must be 2-D, got shape {m.shape}")
    return HEADER.pack(magic, *m.shape) + np.ascontiguousarray(m, dtype=_DTYPES[magic]).tobytes()


def decode_matrix(buf: bytes, magic: bytes = EPISODE_MAGIC, *, source: str = "blob") -> np.ndarray:
    if len(buf) < HEADER.size:
        raise BlobLengthError(f"{source}: {len(buf)} bytes is shorter than the {HEADER.size}-byte header")
    got, rows, cols = HEADER.unpack_from(buf)
    if got != magic:
        raise HeaderMismatchError(f"{source}: magic {got!r}, expected {magic!r}")
    dtype = _DTYPES[magic]
    want = rows * cols * dtype.itemsize
    have = len(buf) - HEADER.size
    if have != want:
        raise BlobLengthError(f"{source}: payload has {have} bytes, header declares {rows}x{cols} ({want} bytes)")
    return np.frombuffer(buf, dtype=dtype, offset=HEADER.size).reshape(rows, cols).astype(np.float64)


def _read_blob(path: Path, expect: tuple[int, int]) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"missing blob: {path}")
    buf = path.read_bytes()
    if len(buf) >= HEADER.size:
        _, rows, cols = HEADER.unpack_from(buf)
        if (rows, cols) != expect:
            raise HeaderMismatchError(f"{path}: header says {rows}x{cols}, manifest implies {expect[0]}x{expect[1]}")
    return decode_matrix(buf, source=str(path))


# episodes ---------------------------------------------------------------------


def save_episode(episode: Episode, path) -> Path:
    """Write ``<stem>.json`` plus three ``<stem>.*.bin`` blobs next to it."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    t, n, d_v = episode.patch_embeddings.shape
    blobs = {
        "patches": f"{stem}.patches.bin",
        "attention": f"{stem}.attention.bin",
        "text": f"{stem}.text.bin",
    }
    (path.parent / blobs["patches"]).write_bytes(encode_matrix(episode.patch_embeddings.reshape(t * n, d_v)))
    (path.parent / blobs["attention"]).write_bytes(encode_matrix(episode.attention))
    (path.parent / blobs["text"]).write_bytes(encode_matrix(episode.text_embedding.reshape(1, -1)))
    manifest = {
        "format": EPISODE_FORMAT,
        "class_id": int(episode.class_id),
        "label": episode.annotation,
        "T": t,
        "N": n,
        "d_V": d_v,
        "d_T": episode.d_t,
        "regions": [{name: list(idx) for name, idx in fr.items()} for fr in episode.regions],
        "alignment": {str(k): int(v) for k, v in sorted(episode.alignment.items())},
        "blobs": blobs,
    }
    write_text(path, dump_json(manifest))
    return path


def load_episode(manifest_path) -> Episode:
    path = Path(manifest_path)
    m = read_json(path)
    if m.get("format") != EPISODE_FORMAT:
        raise HeaderMismatchError(f"{path}: unknown format {m.get('format')!r}")
    try:
        t, n, d_v, d_t = (int(m[k]) for k in ("T", "N", "d_V", "d_T"))
        blobs = m["blobs"]
        regions_raw = m["regions"]
        alignment = {int(k): int(v) for k, v in m["alignment"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    base = path.parent
    z = _read_blob(base / blobs["patches"], (t * n, d_v)).reshape(t, n, d_v)
    att = _read_blob(base / blobs["attention"], (t, n))
    text = _read_blob(base / blobs["text"], (1, d_t)).reshape(d_t)
    if len(regions_raw) != t:
        raise IndexRangeError(f"{path}: {len(regions_raw)} region lists for T={t}")
    regions = []
    for frame_idx, fr in enumerate(regions_raw):
        frame_regions = {}
        for name, idx in fr.items():
            if any(not 0 <= int(i) < n for i in idx):
                raise IndexRangeError(f"{path}: frame {frame_idx} region {name!r} indexes outside [0, {n})")
            frame_regions[name] = tuple(int(i) for i in idx)
        regions.append(frame_regions)
    if sorted(alignment) != list(range(t)):
        raise IndexRangeError(f"{path}: alignment does not cover frames 0..{t - 1}")
    ep = Episode(z, att, regions, text, str(m["label"]), int(m["class_id"]), alignment)
    ep.validate()
    return ep


def save_dataset(episodes: list[Episode], out_dir, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ep in enumerate(episodes):
        names.append(save_episode(ep, out / f"ep_{i:05d}.json").name)
    index = {"format": DATASET_FORMAT, "episodes": names, "meta": meta or {}}
    write_text(out / "dataset.json", dump_json(index))
    return out / "dataset.json"


def load_dataset(path) -> tuple[list[Episode], dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    index = read_json(path)
    if index.get("format") != DATASET_FORMAT:
        raise HeaderMismatchError(f"{path}: unknown format {index.get('format')!r}")
    episodes = [load_episode(path.parent / name) for name in index["episodes"]]
    return episodes, index.get("meta", {})


# checkpoints ------------------------------------------------------------------


def save_checkpoint(arrays: dict[str, np.ndarray], path, meta: dict | None = None) -> Path:
    """Write ``<stem>.json`` and a single ``<stem>.bin`` of concatenated records."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_name = f"{path.stem}.bin"
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        rec = encode_matrix(a.reshape(1, -1) if a.ndim < 2 else a.reshape(a.shape[0], -1), CHECKPOINT_MAGIC)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(rec)})
        chunks.append(rec)
        offset += len(rec)
    (path.parent / blob_name).write_bytes(b"".join(chunks))
    manifest = {"format": CHECKPOINT_FORMAT, "blob": blob_name, "tensors": entries, "meta": meta or {}}
    write_text(path, dump_json(manifest))
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    m = read_json(path)
    if m.get("format") != CHECKPOINT_FORMAT:
        raise HeaderMismatchError(f"{path}: unknown format {m.get('format')!r}")
    blob_path = path.parent / m["blob"]
    if not blob_path.is_file():
        raise MissingFileError(f"missing blob: {blob_path}")
    buf = blob_path.read_bytes()
    arrays = {}
    for e in m["tensors"]:
        start, size = int(e["offset"]), int(e["nbytes"])
        if start + size > len(buf):
            raise BlobLengthError(f"{blob_path}: record {e['name']!r} runs past end of file")
        mat = decode_matrix(buf[start:start + size], CHECKPOINT_MAGIC, source=f"{blob_path}:{e['name']}")
        shape = tuple(e["shape"])
        if mat.size != int(np.prod(shape)):
            raise HeaderMismatchError(f"{blob_path}: record {e['name']!r} does not match shape {shape}")
        arrays[e["name"]] = mat.reshape(shape)
    return arrays, m.get("meta", {})
