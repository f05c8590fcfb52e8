"""Synthetic dataset generation and the on-disk dataset format.

A dataset directory holds ``meta.txt`` (class table and ignore label) and, per
record ``NNNN``, ``NNNN.ppm`` (8-bit RGB), ``NNNN_sem.pgm`` and
``NNNN_inst.pgm`` (16-bit single channel).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..loss import GroundTruthSegment
from ..ops import interp_matrix
from ..postprocess import ClassInfo, PanopticMap, Segment

IGNORE_LABEL = 255
MASK_STRIDE = 8


class DataError(ValueError):
    """Malformed dataset file or record."""


@dataclass
class DatasetRecord:
    image: np.ndarray        # (3, H, W) in [0, 1]
    semantic: np.ndarray     # (H, W) int
    instances: np.ndarray    # (H, W) int, 0 = no instance
    classes: list = field(default_factory=list)
    ignore_label: int = IGNORE_LABEL

    def validate(self) -> None:
        K = len(self.classes)
        bad = (self.semantic >= K) & (self.semantic != self.ignore_label)
        if np.any(bad) or np.any(self.semantic < 0):
            raise DataError("semantic label outside [0, K) and not ignore_label")
        for iid in np.unique(self.instances):
            if iid == 0:
                continue
            cls = np.unique(self.semantic[self.instances == iid])
            if cls.size != 1:
                raise DataError(f"instance {iid} spans classes {cls.tolist()}")

    @property
    def size(self) -> tuple:
        return self.semantic.shape

    def panoptic(self) -> PanopticMap:
        """Ground-truth panoptic map: one segment per instance, one per stuff
        class present; ignored pixels are void."""
        ids = np.zeros(self.semantic.shape, dtype=np.int64)
        segments = []
        for iid in np.unique(self.instances):
            if iid == 0:
                continue
            region = self.instances == iid
            cls = int(self.semantic[region][0])
            sid = len(segments) + 1
            ids[region] = sid
            segments.append(Segment(sid, cls, self.classes[cls].is_thing, int(region.sum())))
        for cls, info in enumerate(self.classes):
            region = (self.semantic == cls) & (self.instances == 0)
            if info.is_thing or not region.any():
                continue
            sid = len(segments) + 1
            ids[region] = sid
            segments.append(Segment(sid, cls, False, int(region.sum())))
        return PanopticMap(ids, segments)

    def targets(self, stride: int = MASK_STRIDE) -> list[GroundTruthSegment]:
        """Training segments at mask resolution (nearest sampling at cell centers)."""
        H, W = self.semantic.shape
        Ah = interp_matrix(H, H // stride, "nearest").argmax(axis=1)
        Aw = interp_matrix(W, W // stride, "nearest").argmax(axis=1)
        pan = self.panoptic()
        small = pan.segment_ids[np.ix_(Ah, Aw)]
        out = []
        for s in pan.segments:
            m = small == s.segment_id
            if m.any():
                out.append(GroundTruthSegment(m, s.class_id, s.is_thing))
        return out


def default_classes(K: int) -> list[ClassInfo]:
    """First ceil(K/2) classes are stuff, the rest things."""
    n_stuff = max(1, (K + 1) // 2)
    return [ClassInfo(f"{'stuff' if c < n_stuff else 'thing'}{c}", c >= n_stuff)
            for c in range(K)]


def class_palette(K: int) -> np.ndarray:
    rng = np.random.default_rng(7919)
    return rng.uniform(0.1, 0.9, size=(K, 3))


def _draw_record(rng, H, W, classes, max_instances, cell, noise) -> DatasetRecord:
    h, w = H // cell, W // cell
    stuff = [c for c, info in enumerate(classes) if not info.is_thing]
    things = [c for c, info in enumerate(classes) if info.is_thing]
    sem = np.full((h, w), rng.choice(stuff), dtype=np.int64)
    if len(stuff) > 1 and rng.random() < 0.5:
        row = int(rng.integers(1, h))
        sem[row:] = rng.choice([c for c in stuff if c != sem[0, 0]])
    inst = np.zeros((h, w), dtype=np.int64)
    n = int(rng.integers(1, max_instances + 1)) if max_instances > 0 and things else 0
    occupied = np.zeros((h, w), dtype=bool)
    placed = 0
    for _ in range(50 * max(n, 1)):
        if placed >= n:
            break
        sh = int(rng.integers(max(2, h // 6), max(3, h // 2) + 1))
        sw = int(rng.integers(max(2, w // 6), max(3, w // 2) + 1))
        y0 = int(rng.integers(0, h - sh + 1))
        x0 = int(rng.integers(0, w - sw + 1))
        yy, xx = np.mgrid[0:sh, 0:sw]
        if rng.random() < 0.5:
            shape = np.ones((sh, sw), dtype=bool)
        else:
            cy, cx = (sh - 1) / 2, (sw - 1) / 2
            shape = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
        region = np.zeros((h, w), dtype=bool)
        region[y0:y0 + sh, x0:x0 + sw] = shape
        # keep a one-cell gap between instances
        grown = region.copy()
        grown[1:] |= region[:-1]
        grown[:-1] |= region[1:]
        grown[:, 1:] |= grown[:, :-1]
        grown[:, :-1] |= grown[:, 1:]
        if np.any(grown & occupied):
            continue
        placed += 1
        occupied |= region
        sem[region] = rng.choice(things)
        inst[region] = placed
    sem = np.repeat(np.repeat(sem, cell, 0), cell, 1)
    inst = np.repeat(np.repeat(inst, cell, 0), cell, 1)
    palette = class_palette(len(classes))
    img = palette[sem].transpose(2, 0, 1) + rng.normal(0.0, noise, (3, H, W))
    img = np.round(np.clip(img, 0.0, 1.0) * 255) / 255
    return DatasetRecord(img, sem, inst, list(classes))


def generate_synthetic_dataset(seed: int, count: int, image_size=(96, 96), K: int = 4,
                               max_instances: int = 3, cell: int = MASK_STRIDE,
                               noise: float = 0.05, max_attempts: int = 100) -> list[DatasetRecord]:
    """Deterministic set of stuff backgrounds with rectangle/ellipse instances.

    Shapes are laid out on a ``cell``-pixel grid.  The whole set is redrawn
    until every class that can occur appears somewhere in it.
    """
    H, W = image_size
    if H % 32 or W % 32:
        raise DataError(f"image size {H}x{W} must be a multiple of 32")
    if H % cell or W % cell:
        raise DataError(f"image size must be a multiple of the cell size {cell}")
    classes = default_classes(K)
    rng = np.random.default_rng(seed)
    wanted = {c for c, info in enumerate(classes) if not info.is_thing or max_instances > 0}
    records: list[DatasetRecord] = []
    for _ in range(max_attempts):
        records = [_draw_record(rng, H, W, classes, max_instances, cell, noise)
                   for _ in range(count)]
        seen = set()
        for r in records:
            seen.update(np.unique(r.semantic).tolist())
        if wanted <= seen or count == 0:
            break
    return records


# ------------------------------------------------------------------ file IO

def write_ppm(path, image: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] as binary 8-bit PPM."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    H, W = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode())
        f.write(arr.tobytes())


def write_pgm16(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise DataError("labels do not fit in 16 bits")
    H, W = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n65535\n".encode())
        f.write(arr.astype(">u2").tobytes())


def _read_netpbm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    body = data[pos + 1:]
    return magic, W, H, maxval, body


def read_ppm(path) -> np.ndarray:
    magic, W, H, maxval, body = _read_netpbm(path)
    if magic != "P6":
        raise DataError(f"{path}: not a binary PPM")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(body, dtype=dtype, count=H * W * 3).reshape(H, W, 3)
    return arr.transpose(2, 0, 1).astype(float) / maxval


def read_pgm(path) -> np.ndarray:
    magic, W, H, maxval, body = _read_netpbm(path)
    if magic != "P5":
        raise DataError(f"{path}: not a binary PGM")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(body, dtype=dtype, count=H * W).reshape(H, W).astype(np.int64)


def write_metadata(path, classes: list[ClassInfo], ignore_label: int = IGNORE_LABEL) -> None:
    lines = ["# class table: id kind name", f"ignore_label {ignore_label}"]
    lines += [f"class {c} {'thing' if info.is_thing else 'stuff'} {info.name}"
              for c, info in enumerate(classes)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metadata(path) -> tuple[list[ClassInfo], int]:
    classes: dict[int, ClassInfo] = {}
    ignore = IGNORE_LABEL
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "ignore_label":
            ignore = int(parts[1])
        elif parts[0] == "class" and len(parts) >= 4 and parts[2] in ("thing", "stuff"):
            classes[int(parts[1])] = ClassInfo(" ".join(parts[3:]), parts[2] == "thing")
        else:
            raise DataError(f"{path}: cannot parse line {raw!r}")
    if sorted(classes) != list(range(len(classes))):
        raise DataError(f"{path}: class ids must be 0..K-1")
    return [classes[c] for c in range(len(classes))], ignore


def write_dataset(directory, records: list[DatasetRecord]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if not records:
        raise DataError("refusing to write an empty dataset")
    write_metadata(d / "meta.txt", records[0].classes, records[0].ignore_label)
    for i, r in enumerate(records):
        write_ppm(d / f"{i:04d}.ppm", r.image)
        write_pgm16(d / f"{i:04d}_sem.pgm", r.semantic)
        write_pgm16(d / f"{i:04d}_inst.pgm", r.instances)


def read_dataset(directory) -> list[DatasetRecord]:
    d = Path(directory)
    if not (d / "meta.txt").is_file():
        raise DataError(f"{d}: missing meta.txt")
    classes, ignore = read_metadata(d / "meta.txt")
    records = []
    for name in sorted(os.listdir(d)):
        if not name.endswith(".ppm"):
            continue
        stem = name[:-4]
        rec = DatasetRecord(read_ppm(d / name), read_pgm(d / f"{stem}_sem.pgm"),
                            read_pgm(d / f"{stem}_inst.pgm"), classes, ignore)
        rec.validate()
        records.append(rec)
    if not records:
        raise DataError(f"{d}: no records")
    return records
