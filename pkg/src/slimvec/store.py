"""Item payload store (items.dat + items.idx) and corpus ingestion.

items.dat holds the raw payload bytes back to back; items.idx is a plain
little-endian u64 offset table with n+1 entries (offsets[0] == 0,
offsets[n] == len(items.dat)). Row i of the store is node i of the graph.

Ingestion accepts either a line-delimited records file (one item per
non-empty line) or a directory of text files chunked with a byte window.
Chunking is byte-based (default 1024-byte windows with 128-byte overlap)
rather than tokenizer-based, and the chunker is pluggable.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError

DEFAULT_CHUNK_BYTES = 1024
DEFAULT_CHUNK_OVERLAP = 128

ITEMS_DAT = "items.dat"
ITEMS_IDX = "items.idx"


class ItemStore:
    """Appendable payload store; reads stay cheap via the offset table."""

    def __init__(self, dat_path: Path, idx_path: Path,
                 offsets: np.ndarray) -> None:
        self.dat_path = Path(dat_path)
        self.idx_path = Path(idx_path)
        self._offsets = offsets.astype(np.int64)
        self._fh = open(self.dat_path, "rb")

    # -- lifecycle --

    @classmethod
    def create(cls, directory, payloads) -> "ItemStore":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        dat_path = directory / ITEMS_DAT
        idx_path = directory / ITEMS_IDX
        offsets = [0]
        with open(dat_path, "wb") as dat:
            for payload in payloads:
                dat.write(payload)
                offsets.append(offsets[-1] + len(payload))
        arr = np.asarray(offsets, dtype="<u8")
        with open(idx_path, "wb") as idx:
            idx.write(arr.tobytes())
        return cls.open(directory)

    @classmethod
    def open(cls, directory) -> "ItemStore":
        directory = Path(directory)
        dat_path = directory / ITEMS_DAT
        idx_path = directory / ITEMS_IDX
        if not dat_path.exists() or not idx_path.exists():
            raise FormatError("items", f"missing {ITEMS_DAT} or {ITEMS_IDX} in {directory}")
        raw = idx_path.read_bytes()
        if len(raw) < 8 or len(raw) % 8:
            raise FormatError("items.idx", "offset table length is not a multiple of 8")
        offsets = np.frombuffer(raw, dtype="<u8").astype(np.int64)
        if offsets[0] != 0 or np.any(np.diff(offsets) < 0):
            raise FormatError("items.idx", "offsets must start at 0 and be nondecreasing")
        if int(offsets[-1]) != dat_path.stat().st_size:
            raise FormatError(
                "items.idx",
                f"last offset {int(offsets[-1])} != payload size {dat_path.stat().st_size}",
            )
        return cls(dat_path, idx_path, offsets)

    def close(self) -> None:
        self._fh.close()

    # -- access --

    @property
    def n(self) -> int:
        return self._offsets.shape[0] - 1

    def total_bytes(self) -> int:
        return int(self._offsets[-1])

    def get(self, i: int) -> bytes:
        if not 0 <= i < self.n:
            raise InvalidArgumentError(f"item id {i} out of range [0, {self.n})")
        start, end = int(self._offsets[i]), int(self._offsets[i + 1])
        self._fh.seek(start)
        return self._fh.read(end - start)

    def items(self) -> list[bytes]:
        return [self.get(i) for i in range(self.n)]

    def append(self, content: bytes) -> int:
        with open(self.dat_path, "ab") as dat:
            dat.write(content)
        new_end = int(self._offsets[-1]) + len(content)
        with open(self.idx_path, "ab") as idx:
            idx.write(np.asarray([new_end], dtype="<u8").tobytes())
        self._offsets = np.append(self._offsets, new_end)
        return self.n - 1

    def truncate(self, n: int) -> None:
        if not 0 <= n <= self.n:
            raise InvalidArgumentError(f"cannot truncate to {n} of {self.n}")
        end = int(self._offsets[n])
        with open(self.dat_path, "r+b") as dat:
            dat.truncate(end)
        with open(self.idx_path, "r+b") as idx:
            idx.truncate(8 * (n + 1))
        self._offsets = self._offsets[: n + 1]


# --- Ingestion -----------------------------------------------------------------


def chunk_window(data: bytes, window: int = DEFAULT_CHUNK_BYTES,
                 overlap: int = DEFAULT_CHUNK_OVERLAP) -> list[bytes]:
    """Overlapping byte windows; the default chunker for directory input."""
    if window < 1 or not 0 <= overlap < window:
        raise InvalidArgumentError("need window >= 1 and 0 <= overlap < window")
    if not data:
        return []
    step = window - overlap
    chunks = []
    for start in range(0, len(data), step):
        piece = data[start : start + window]
        if piece.strip():
            chunks.append(piece)
        if start + window >= len(data):
            break
    return chunks


def iter_input_items(input_path, window: int = DEFAULT_CHUNK_BYTES,
                     overlap: int = DEFAULT_CHUNK_OVERLAP,
                     chunker=chunk_window, warn=None):
    """Yield item payloads from a records file or a directory of text files.

    Directory files are walked in sorted relative-path order so re-ingesting
    the same tree is bitwise deterministic. Unreadable files produce warnings
    via ``warn`` and are skipped.
    """
    path = Path(input_path)
    if path.is_file():
        with open(path, "rb") as fh:
            for line in fh:
                item = line.rstrip(b"\r\n")
                if item:
                    yield item
        return
    if not path.is_dir():
        raise InvalidArgumentError(f"input path {path} is neither file nor directory")
    files = sorted(p for p in path.rglob("*") if p.is_file())
    for file_path in files:
        try:
            data = file_path.read_bytes()
        except OSError as exc:
            if warn is not None:
                warn(f"skipping unreadable {file_path}: {exc}")
            continue
        yield from chunker(data, window, overlap)


def ingest(input_path, index_dir, window: int = DEFAULT_CHUNK_BYTES,
           overlap: int = DEFAULT_CHUNK_OVERLAP, warn=None) -> tuple[int, int]:
    """Write the item store for a corpus; returns (item count, byte size).

    Re-ingesting identical input produces bitwise-identical store files.
    Zero ingested items is an error.
    """
    store = ItemStore.create(
        index_dir, iter_input_items(input_path, window, overlap, warn=warn)
    )
    try:
        count, size = store.n, store.total_bytes()
    finally:
        store.close()
    if count == 0:
        os.remove(Path(index_dir) / ITEMS_DAT)
        os.remove(Path(index_dir) / ITEMS_IDX)
        raise InvalidArgumentError(f"no items found in {input_path}")
    return count, size
