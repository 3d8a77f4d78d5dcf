"""Run-directory I/O: guarded writes, PPM/PGM images, CSV and key/value manifests."""

from __future__ import annotations

import csv
import hashlib
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class OverwriteError(FileExistsError):
    pass


class RunDir:
    """An output directory that refuses to replace files unless ``force`` is set."""

    def __init__(self, root: str | Path, force: bool = False):
        self.root = Path(root)
        self.force = force
        self.written: list[str] = []

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _claim(self, rel: str) -> Path:
        p = self.path(rel)
        if p.exists() and not self.force and rel not in self.written:
            raise OverwriteError(f"{p} exists; pass --force to overwrite")
        p.parent.mkdir(parents=True, exist_ok=True)
        if rel not in self.written:
            self.written.append(rel)
        return p

    def write_bytes(self, rel: str, data: bytes) -> Path:
        p = self._claim(rel)
        p.write_bytes(data)
        return p

    def write_text(self, rel: str, text: str) -> Path:
        return self.write_bytes(rel, text.encode("utf-8"))

    def write_image(self, rel: str, img: np.ndarray) -> Path:
        return self.write_bytes(rel, encode_pnm(img))


# ------------------------------------------------------------------ images


def encode_pnm(img: np.ndarray) -> bytes:
    """(C, H, W) in [0, 1] to binary PGM (C = 1) or PPM (C = 3), maxval 255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W), got {img.shape}")
    c, h, w = img.shape
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_pnm`, returning (C, H, W) in [0, 1]."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"unsupported PNM header {magic!r} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    raw = np.frombuffer(data[pos : pos + w * h * c], dtype=np.uint8)
    return raw.reshape(h, w, c).transpose(2, 0, 1) / 255.0


# ------------------------------------------------------------------ tables


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def manifest_text(items: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def digest(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def build_id() -> str:
    """Content hash of the package sources, standing in for a commit id."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.blake2b(digest_size=8)
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()
