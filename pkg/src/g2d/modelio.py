"""Binary containers for model parameters (``G2DM``) and embeddings (``EMB1``).

All integers are u32 little-endian and all reals float64 little-endian.

G2DM: magic, version, then until EOF one record per parameter:
name length, UTF-8 name, rank, dims..., values (row-major).

EMB1: magic, count, dim, count x dim values. A tab-separated sidecar
lists ``row<TAB>identity<TAB>image_path<TAB>masked`` per row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODEL_MAGIC = b"G2DM"
MODEL_VERSION = 1
EMB_MAGIC = b"EMB1"


class FormatError(ValueError):
    pass


def encode_model(state: dict[str, np.ndarray]) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION)]
    for name, value in state.items():
        value = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", value.ndim))
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(np.ascontiguousarray(value).tobytes())
    return b"".join(out)


def decode_model(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MODEL_MAGIC:
        raise FormatError("not a G2DM model file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    pos = 8
    state = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise FormatError(f"truncated record {name!r}")
            state[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise FormatError(f"truncated model file: {exc}") from exc
    return state


def save_model(path, *modules) -> None:
    state = {}
    for m in modules:
        state.update(m.state())
    Path(path).write_bytes(encode_model(state))


def load_model(path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing model artifact {p}")
    return decode_model(p.read_bytes())


@dataclass
class EmbeddingRow:
    identity: int
    image_path: str
    masked: bool
    view: int = -1


def write_embeddings(path, vectors: np.ndarray, rows: list[EmbeddingRow]) -> None:
    vectors = np.asarray(vectors, dtype="<f8")
    if vectors.ndim != 2 or len(rows) != vectors.shape[0]:
        raise ValueError("embedding rows and manifest lines must match")
    n, d = vectors.shape
    p = Path(path)
    p.write_bytes(EMB_MAGIC + struct.pack("<II", n, d) + np.ascontiguousarray(vectors).tobytes())
    lines = [f"{i}\t{r.identity}\t{r.image_path}\t{int(r.masked)}\t{r.view}" for i, r in enumerate(rows)]
    sidecar_path(p).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_suffix(p.suffix + ".tsv")


def read_embeddings(path) -> tuple[np.ndarray, list[EmbeddingRow]]:
    p = Path(path)
    buf = p.read_bytes()
    if buf[:4] != EMB_MAGIC:
        raise FormatError(f"{p}: not an EMB1 file")
    n, d = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 8 * n * d:
        raise FormatError(f"{p}: expected {n}x{d} values")
    vectors = np.frombuffer(buf, dtype="<f8", offset=12).reshape(n, d).copy()
    rows = []
    for line in sidecar_path(p).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        f = line.split("\t")
        rows.append(EmbeddingRow(int(f[1]), f[2], f[3] == "1", int(f[4]) if len(f) > 4 else -1))
    if len(rows) != n:
        raise FormatError(f"{p}: {n} vectors but {len(rows)} manifest rows")
    return vectors, rows
