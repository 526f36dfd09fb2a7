"""Procedural voxel shapes, their multi-view renders, and dataset files.

Six parametric families (box, l-shape, t-shape, table, chair, cross) are
built from overlapping axis-aligned slabs, so every instance is connected
and view choice matters: legs, backs and arms occlude each other. Records
are stored in one binary file with a plain-text manifest; every record is
checksummed and the whole dataset is a deterministic function of the seed.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Projector, ViewPose, grid_azimuths

FAMILIES = ("box", "l-shape", "t-shape", "table", "chair", "cross")
_MAGIC = b"ACTD1"
_HEADER = struct.Struct("<5sIHHHBQ")  # magic, id, res, img, views, family, seed
_GEOM = struct.Struct("<ddd")  # elevation, radius, spacing
_CRC = struct.Struct("<I")


class DatasetError(Exception):
    pass


class ManifestError(DatasetError):
    pass


class TruncatedRecordError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    seed: int
    params: dict

    @staticmethod
    def draw(family: str, seed: int, resolution: int) -> "ShapeSpec":
        """Sample family parameters for one shape, deterministically per seed."""
        if family not in FAMILIES:
            raise ValueError(f"unknown shape family {family!r}")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        d = resolution
        lo, hi = 1, d - 1  # keep a one-voxel margin all around

        def ri(a, b):  # inclusive integer range
            return int(rng.integers(a, b + 1))

        # feature sizes scale with resolution so shapes keep their character
        leg = max(2, round(d * 0.16))
        thin = max(2, round(d * 0.12))
        p: dict = {}
        if family == "box":
            p["ex"] = ri(d // 2 - 2, d - 3)
            p["ey"] = ri(d // 2 - 2, d - 3)
            p["ez"] = ri(d // 2 - 2, d - 2)
        elif family == "l-shape":
            p["arm"] = ri(thin, d // 3)
            p["lx"] = ri(3 * d // 4, d - 2)
            p["ly"] = ri(3 * d // 4, d - 2)
            p["h"] = ri(d // 2, d - 2)
        elif family == "t-shape":
            p["stem"] = ri(thin, d // 3)
            p["bar"] = ri(thin, d // 3)
            p["w"] = ri(3 * d // 4, d - 2)
            p["h"] = ri(d // 2, d - 2)
        elif family == "table":
            p["leg"] = ri(leg, leg + max(1, d // 16))
            p["top"] = ri(max(2, d // 8), max(2, d // 8) + 1)
            p["w"] = ri(3 * d // 4, d - 3)
            p["h"] = ri(d // 2, 3 * d // 4)
        elif family == "chair":
            p["leg"] = ri(leg, leg + max(1, d // 16))
            p["seat"] = max(2, d // 8)
            p["back"] = ri(thin, thin + max(1, d // 16))
            p["w"] = ri(d // 2, 3 * d // 4)
            p["seat_h"] = ri(d // 3, d // 2)
        elif family == "cross":
            p["bar"] = ri(thin, d // 3)
            p["length"] = ri(3 * d // 4, d - 2)
            p["vertical"] = ri(0, 1)
        # a random placement offset, bounded so everything stays inside
        p["ox"] = ri(0, 1)
        p["oy"] = ri(0, 1)
        return ShapeSpec(family, seed, p)


def _slab(vol, x0, x1, y0, y1, z0, z1):
    vol[x0:x1, y0:y1, z0:z1] = 1.0


def _build(spec: ShapeSpec, d: int) -> np.ndarray:
    vol = np.zeros((d, d, d))
    p = spec.params
    lo = 1
    ox, oy = p.get("ox", 0), p.get("oy", 0)
    if spec.family == "box":
        _slab(vol, lo + ox, lo + ox + p["ex"], lo + oy, lo + oy + p["ey"], lo, lo + p["ez"])
    elif spec.family == "l-shape":
        a = p["arm"]
        _slab(vol, lo, lo + a, lo, lo + p["ly"], lo, lo + p["h"])
        _slab(vol, lo, lo + p["lx"], lo, lo + a, lo, lo + a)
    elif spec.family == "t-shape":
        s, b, w, h = p["stem"], p["bar"], p["w"], p["h"]
        mid = d // 2
        _slab(vol, mid - s // 2, mid - s // 2 + s, mid - s // 2, mid - s // 2 + s, lo, lo + h)
        _slab(vol, lo + (d - 2 - w) // 2, lo + (d - 2 - w) // 2 + w,
              mid - b // 2, mid - b // 2 + b, lo + h - b, lo + h)
    elif spec.family == "table":
        leg, top, w, h = p["leg"], p["top"], p["w"], p["h"]
        x0 = lo + (d - 2 - w) // 2 + ox
        y0 = lo + (d - 2 - w) // 2 + oy
        _slab(vol, x0, x0 + w, y0, y0 + w, lo + h - top, lo + h)
        for cx in (x0, x0 + w - leg):
            for cy in (y0, y0 + w - leg):
                _slab(vol, cx, cx + leg, cy, cy + leg, lo, lo + h - top)
    elif spec.family == "chair":
        leg, seat, back, w, sh = p["leg"], p["seat"], p["back"], p["w"], p["seat_h"]
        x0, y0 = lo + ox, lo + oy
        _slab(vol, x0, x0 + w, y0, y0 + w, lo + sh, lo + sh + seat)
        _slab(vol, x0, x0 + back, y0, y0 + w, lo + sh, min(d - 1, lo + sh + w))
        for cx in (x0, x0 + w - leg):
            for cy in (y0, y0 + w - leg):
                _slab(vol, cx, cx + leg, cy, cy + leg, lo, lo + sh)
    elif spec.family == "cross":
        b, length = p["bar"], p["length"]
        mid = d // 2
        m0 = mid - b // 2
        c0 = lo + (d - 2 - length) // 2
        _slab(vol, c0, c0 + length, m0, m0 + b, m0, m0 + b)
        _slab(vol, m0, m0 + b, c0, c0 + length, m0, m0 + b)
        if p["vertical"]:
            _slab(vol, m0, m0 + b, m0, m0 + b, c0, c0 + length)
    return vol


def _valid(vol: np.ndarray) -> bool:
    d = vol.shape[0]
    if vol.sum() == 0:
        return False
    # one-voxel empty margin on every face
    if (vol[0].any() or vol[-1].any() or vol[:, 0].any() or vol[:, -1].any()
            or vol[:, :, 0].any() or vol[:, :, -1].any()):
        return False
    return True


def generate_shape(spec: ShapeSpec, resolution: int, max_retries: int = 16) -> tuple[np.ndarray, ShapeSpec]:
    """Build the binary volume for a spec; resample on a degenerate draw."""
    current = spec
    for _ in range(max_retries):
        vol = _build(current, resolution)
        if _valid(vol):
            return vol, current
        current = ShapeSpec.draw(current.family, current.seed + 1, resolution)
    raise DatasetError(
        f"could not generate a valid {spec.family} shape after {max_retries} tries"
    )


@dataclass
class DatasetRecord:
    shape_id: int
    spec: ShapeSpec
    volume: np.ndarray                  # (D, D, D) binary
    azimuths: np.ndarray                # (V,) degrees
    silhouettes: np.ndarray             # (V, S, S) float32
    depths: np.ndarray                  # (V, S, S) float32
    elevation: float
    radius: float

    def view_pose(self, index: int) -> ViewPose:
        return ViewPose(float(self.azimuths[index]), self.elevation, self.radius)

    def view_index(self, azimuth: float) -> int:
        hits = np.nonzero(np.isclose(self.azimuths, azimuth % 360.0))[0]
        if hits.size != 1:
            raise KeyError(f"azimuth {azimuth} is not one of the rendered views")
        return int(hits[0])

    def image(self, azimuth: float) -> np.ndarray:
        """(2, S, S) float64 network input: silhouette and depth channels."""
        i = self.view_index(azimuth)
        return np.stack([
            self.silhouettes[i].astype(np.float64),
            self.depths[i].astype(np.float64),
        ])


def _record_bytes(rec: DatasetRecord) -> bytes:
    d = rec.volume.shape[0]
    s = rec.silhouettes.shape[1]
    v = len(rec.azimuths)
    parts = [
        _HEADER.pack(_MAGIC, rec.shape_id, d, s, v,
                     FAMILIES.index(rec.spec.family), rec.spec.seed),
        _GEOM.pack(rec.elevation, rec.radius, 360.0 / v),
        np.packbits(rec.volume.reshape(-1).astype(np.uint8)).tobytes(),
        rec.azimuths.astype("<f4").tobytes(),
        rec.silhouettes.astype("<f4").tobytes(),
        rec.depths.astype("<f4").tobytes(),
    ]
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _parse_record(buf: bytes) -> DatasetRecord:
    if len(buf) < _HEADER.size + _GEOM.size + _CRC.size:
        raise TruncatedRecordError("record shorter than its fixed header")
    crc_stored, = _CRC.unpack(buf[-_CRC.size:])
    body = buf[:-_CRC.size]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError("record checksum mismatch")
    magic, shape_id, d, s, v, fam, seed = _HEADER.unpack_from(body, 0)
    if magic != _MAGIC:
        raise ManifestError(f"bad record magic {magic!r}")
    off = _HEADER.size
    elevation, radius, _spacing = _GEOM.unpack_from(body, off)
    off += _GEOM.size
    nvox = d * d * d
    nbits = (nvox + 7) // 8
    need = nbits + 4 * v + 2 * (4 * v * s * s)
    if len(body) - off != need:
        raise TruncatedRecordError(
            f"record {shape_id} payload is {len(body) - off} bytes, expected {need}"
        )
    bits = np.unpackbits(np.frombuffer(body, np.uint8, nbits, off))[:nvox]
    volume = bits.reshape(d, d, d).astype(np.float64)
    off += nbits
    azimuths = np.frombuffer(body, "<f4", v, off).astype(np.float64)
    off += 4 * v
    sil = np.frombuffer(body, "<f4", v * s * s, off).reshape(v, s, s)
    off += 4 * v * s * s
    dep = np.frombuffer(body, "<f4", v * s * s, off).reshape(v, s, s)
    spec = ShapeSpec.draw(FAMILIES[fam], seed, d)
    return DatasetRecord(shape_id, spec, volume, azimuths, sil.copy(), dep.copy(),
                         elevation, radius)


def render_record(shape_id: int, spec: ShapeSpec, volume: np.ndarray,
                  projector: Projector, spacing: float = 15.0) -> DatasetRecord:
    azimuths = grid_azimuths(spacing)
    sils, deps = [], []
    for az in azimuths:
        sil, dep = projector.raycast(volume, float(az))
        sils.append(sil.astype(np.float32))
        deps.append(dep.astype(np.float32))
    return DatasetRecord(shape_id, spec, volume, azimuths,
                         np.stack(sils), np.stack(deps),
                         projector.elevation, projector.radius)


def build_dataset(out_dir, count: int, seed: int, resolution: int = 16,
                  image_size: int = 32, train_fraction: float = 0.8,
                  spacing: float = 15.0, depth_samples: int = 32) -> "Dataset":
    """Generate, render and persist a dataset; returns the loaded handle."""
    if count < 2:
        raise ValueError("a dataset needs at least 2 shapes for a split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    projector = Projector((image_size, image_size), depth_samples)
    order = np.random.default_rng(np.random.SeedSequence((seed, 0))).permutation(count)
    n_train = int(round(count * train_fraction))
    split_of = {int(sid): ("train" if i < n_train else "test")
                for i, sid in enumerate(order)}

    offsets = []
    with open(out / "records.bin", "wb") as fh:
        for sid in range(count):
            family = FAMILIES[sid % len(FAMILIES)]
            shape_seed = int(
                np.random.SeedSequence((seed, 1, sid)).generate_state(1)[0]
            )
            spec = ShapeSpec.draw(family, shape_seed, resolution)
            volume, spec = generate_shape(spec, resolution)
            rec = render_record(sid, spec, volume, projector, spacing)
            blob = _record_bytes(rec)
            offsets.append((sid, fh.tell(), len(blob), split_of[sid], family))
            fh.write(blob)

    with open(out / "manifest.txt", "w", newline="\n") as fh:
        fh.write(
            f"{_MAGIC.decode()} count={count} res={resolution} img={image_size} "
            f"views={int(round(360 / spacing))} spacing={spacing:g} seed={seed} "
            f"train_fraction={train_fraction:g}\n"
        )
        for sid, off, length, split, family in offsets:
            fh.write(f"{sid} {off} {length} {split} {family}\n")
    return Dataset(out)


class Dataset:
    """Read handle over a generated dataset directory; records cache in memory."""

    def __init__(self, path):
        self.path = Path(path)
        manifest = self.path / "manifest.txt"
        if not manifest.exists():
            raise ManifestError(f"no manifest at {manifest}")
        lines = manifest.read_text().splitlines()
        if not lines or not lines[0].startswith(_MAGIC.decode()):
            raise ManifestError(f"malformed manifest header in {manifest}")
        self.meta = {}
        for tok in lines[0].split()[1:]:
            k, _, val = tok.partition("=")
            self.meta[k] = float(val) if "." in val else int(val)
        self.resolution = int(self.meta["res"])
        self.image_size = int(self.meta["img"])
        self.index: dict[int, tuple[int, int, str]] = {}
        self.train_ids: list[int] = []
        self.test_ids: list[int] = []
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != 5:
                raise ManifestError(f"malformed manifest line: {ln!r}")
            sid, off, length, split = int(parts[0]), int(parts[1]), int(parts[2]), parts[3]
            self.index[sid] = (off, length, split)
            (self.train_ids if split == "train" else self.test_ids).append(sid)
        self._cache: dict[int, DatasetRecord] = {}

    def load_record(self, shape_id: int) -> DatasetRecord:
        if shape_id in self._cache:
            return self._cache[shape_id]
        if shape_id not in self.index:
            raise ManifestError(f"record {shape_id} is not in the manifest")
        off, length, _ = self.index[shape_id]
        with open(self.path / "records.bin", "rb") as fh:
            fh.seek(off)
            buf = fh.read(length)
        if len(buf) != length:
            raise TruncatedRecordError(
                f"record {shape_id}: read {len(buf)} of {length} bytes"
            )
        rec = _parse_record(buf)
        if rec.shape_id != shape_id:
            raise ManifestError(
                f"record id {rec.shape_id} does not match manifest entry {shape_id}"
            )
        self._cache[shape_id] = rec
        return rec
