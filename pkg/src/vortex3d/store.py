"""On-disk data model: spot tables, volumes, sections, gene panels, checkpoints.

All formats are deliberately plain (CSV, JSON sidecars, raw little-endian
blobs) so that every artifact is hand-editable in tests and round-trips
bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed text input; carries the 1-based offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(ValueError):
    """Binary payload inconsistent with its declared layout."""


class CorruptionError(ValueError):
    """Stored digest does not match the payload."""


class PanelKind(str, Enum):
    HEG = "HEG"
    HVG = "HVG"
    MARKER = "MARKER"
    UNION = "UNION"
    INTERSECTION = "INTERSECTION"


class Modality(str, Enum):
    MICROCT = "MICROCT"
    HE_STACK = "HE_STACK"
    OTHER = "OTHER"


_VOLUME_DTYPES = {"u8": np.uint8, "u16": np.uint16, "f32": np.float32}
_CKPT_MAGIC = b"VTXCKPT1"


def _freeze(arr):
    # copy unless already immutable, so freezing never aliases caller arrays
    if isinstance(arr, np.ndarray) and not arr.flags.writeable:
        return np.ascontiguousarray(arr)
    arr = np.array(arr, copy=True, order="C")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GenePanel:
    """Ordered, case-sensitive list of unique gene symbols."""

    genes: tuple
    kind: PanelKind = PanelKind.MARKER

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(self.genes))
        if not self.genes:
            raise ValueError("gene panel must be non-empty")
        seen = set()
        for g in self.genes:
            if not isinstance(g, str) or not g:
                raise ValueError(f"invalid gene symbol: {g!r}")
            if g in seen:
                raise ValueError(f"duplicate gene symbol: {g!r}")
            seen.add(g)
        object.__setattr__(self, "kind", PanelKind(self.kind))

    def __len__(self):
        return len(self.genes)

    def index_of(self, gene):
        try:
            return self.genes.index(gene)
        except ValueError:
            raise KeyError(f"gene {gene!r} not in panel") from None


@dataclass(frozen=True)
class SpotTable:
    """Per-spot planar coordinates and raw counts over a gene panel."""

    panel: GenePanel
    spot_ids: tuple
    section_ids: tuple
    x_um: np.ndarray
    y_um: np.ndarray
    counts: np.ndarray  # (n_spots, len(panel)), non-negative
    batch_ids: np.ndarray

    def __post_init__(self):
        n = len(self.spot_ids)
        object.__setattr__(self, "spot_ids", tuple(self.spot_ids))
        object.__setattr__(self, "section_ids", tuple(self.section_ids))
        object.__setattr__(self, "x_um", _freeze(np.asarray(self.x_um, dtype=np.float64)))
        object.__setattr__(self, "y_um", _freeze(np.asarray(self.y_um, dtype=np.float64)))
        object.__setattr__(self, "counts", _freeze(np.asarray(self.counts, dtype=np.float64)))
        object.__setattr__(self, "batch_ids", _freeze(np.asarray(self.batch_ids, dtype=np.int64)))
        if self.counts.shape != (n, len(self.panel)):
            raise ValueError(
                f"counts shape {self.counts.shape} does not match "
                f"{n} spots x {len(self.panel)} genes"
            )
        if len(self.section_ids) != n or self.x_um.shape != (n,) or self.y_um.shape != (n,):
            raise ValueError("spot field lengths disagree")
        if not (np.isfinite(self.x_um).all() and np.isfinite(self.y_um).all()):
            raise ValueError("spot coordinates must be finite")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")
        per_section = {}
        for sid, spot in zip(self.section_ids, self.spot_ids):
            key = (sid, spot)
            if key in per_section:
                raise ValueError(f"duplicate spot id {spot!r} in section {sid!r}")
            per_section[key] = True

    @property
    def n_spots(self):
        return len(self.spot_ids)

    def section(self, section_id):
        """Subset to one section, preserving order."""
        keep = [i for i, s in enumerate(self.section_ids) if s == section_id]
        return self.subset(keep)

    def subset(self, indices):
        idx = list(indices)
        return SpotTable(
            panel=self.panel,
            spot_ids=[self.spot_ids[i] for i in idx],
            section_ids=[self.section_ids[i] for i in idx],
            x_um=self.x_um[idx],
            y_um=self.y_um[idx],
            counts=self.counts[idx],
            batch_ids=self.batch_ids[idx],
        )


@dataclass(frozen=True)
class Volume:
    """3D intensity grid with physical voxel spacing (microns)."""

    dims: tuple  # (nx, ny, nz)
    spacing_um: tuple  # (sx, sy, sz)
    voxels: np.ndarray  # shape (nx, ny, nz)
    modality: Modality = Modality.OTHER

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_um)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_um", spacing)
        object.__setattr__(self, "modality", Modality(self.modality))
        if any(d <= 0 for d in dims) or len(dims) != 3:
            raise ValueError(f"invalid dims {dims}")
        if any(s <= 0 for s in spacing) or len(spacing) != 3:
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        vox = np.asarray(self.voxels)
        if vox.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(f"voxel count {vox.size} != product of dims {dims}")
        object.__setattr__(self, "voxels", _freeze(vox.reshape(dims)))


@dataclass(frozen=True)
class SectionImage:
    """2D section with physical pixel spacing; depth is known post-registration."""

    dims: tuple  # (w, h)
    spacing_um: float
    pixels: np.ndarray  # (h, w) or (h, w, 3)
    section_id: str
    depth_um: float | None = None

    def __post_init__(self):
        w, h = (int(d) for d in self.dims)
        object.__setattr__(self, "dims", (w, h))
        object.__setattr__(self, "spacing_um", float(self.spacing_um))
        if self.spacing_um <= 0:
            raise ValueError("pixel spacing must be positive")
        px = np.asarray(self.pixels)
        if px.shape[:2] != (h, w) or px.ndim not in (2, 3):
            raise ValueError(f"pixel shape {px.shape} does not match dims {(w, h)}")
        object.__setattr__(self, "pixels", _freeze(px))


@dataclass
class Checkpoint:
    """Named tensor collection plus a manifest describing stage and layout."""

    tensors: dict  # name -> np.ndarray
    manifest: dict = field(default_factory=dict)

    def digest(self):
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def config_digest(obj):
    """Stable digest of any JSON-serializable configuration object."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Gene panels
# ---------------------------------------------------------------------------

def save_panel(panel, path):
    with open(path, "w") as f:
        json.dump({"genes": list(panel.genes), "kind": panel.kind.value}, f, indent=1)


def load_panel(path):
    with open(path) as f:
        doc = json.load(f)
    return GenePanel(genes=doc["genes"], kind=PanelKind(doc["kind"]))


# ---------------------------------------------------------------------------
# Spot tables (CSV)
# ---------------------------------------------------------------------------

_FIXED_COLS = ("spot_id", "section_id", "x_um", "y_um", "batch_id")


def load_spot_table(path, panel):
    """Read a spot CSV, re-ordering gene columns to panel order.

    Genes missing from the file are 0-filled (with a warning); file columns
    outside the panel are ignored.
    """
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if tuple(header[: len(_FIXED_COLS)]) != _FIXED_COLS:
            raise ParseError(
                f"header must start with {','.join(_FIXED_COLS)}", line=1
            )
        file_genes = header[len(_FIXED_COLS):]
        gene_pos = {g: i for i, g in enumerate(file_genes)}
        missing = [g for g in panel.genes if g not in gene_pos]
        if missing:
            warnings.warn(
                f"{path.name}: {len(missing)} panel gene(s) absent from file, "
                f"0-filled: {', '.join(missing)}"
            )
        spot_ids, section_ids, xs, ys, batches, rows = [], [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}", line=lineno
                )
            try:
                x = float(row[2])
                y = float(row[3])
                b = int(row[4])
                vals = [float(v) for v in row[len(_FIXED_COLS):]]
            except ValueError as e:
                raise ParseError(str(e), line=lineno) from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ParseError("non-finite coordinate", line=lineno)
            bad = [file_genes[i] for i, v in enumerate(vals) if v < 0 or not np.isfinite(v)]
            if bad:
                raise ParseError(f"negative or non-finite count for {bad[0]}", line=lineno)
            counts = np.zeros(len(panel))
            for j, g in enumerate(panel.genes):
                if g in gene_pos:
                    counts[j] = vals[gene_pos[g]]
            spot_ids.append(row[0])
            section_ids.append(row[1])
            xs.append(x)
            ys.append(y)
            batches.append(b)
            rows.append(counts)
        counts_arr = np.array(rows) if rows else np.zeros((0, len(panel)))
    return SpotTable(
        panel=panel,
        spot_ids=spot_ids,
        section_ids=section_ids,
        x_um=np.array(xs),
        y_um=np.array(ys),
        counts=counts_arr,
        batch_ids=np.array(batches, dtype=np.int64),
    )


def save_spot_table(table, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(_FIXED_COLS) + list(table.panel.genes))
        for i in range(table.n_spots):
            writer.writerow(
                [
                    table.spot_ids[i],
                    table.section_ids[i],
                    repr(float(table.x_um[i])),
                    repr(float(table.y_um[i])),
                    int(table.batch_ids[i]),
                ]
                + [repr(float(v)) for v in table.counts[i]]
            )


# ---------------------------------------------------------------------------
# Volumes and sections (raw blob + JSON sidecar)
# ---------------------------------------------------------------------------

def _sidecar_path(path):
    return Path(str(path) + ".json")


def save_volume(volume, path):
    vox = np.asarray(volume.voxels)
    if vox.dtype == np.float64:
        vox = vox.astype(np.float32)
    dtype_name = {np.dtype(np.uint8): "u8", np.dtype(np.uint16): "u16",
                  np.dtype(np.float32): "f32"}.get(vox.dtype)
    if dtype_name is None:
        raise FormatError(f"unsupported voxel dtype {vox.dtype}")
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(vox).astype(vox.dtype.newbyteorder("<")).tobytes())
    with open(_sidecar_path(path), "w") as f:
        json.dump(
            {
                "dims": list(volume.dims),
                "spacing_um": list(volume.spacing_um),
                "dtype": dtype_name,
                "modality": volume.modality.value,
            },
            f,
            indent=1,
        )


def load_volume(path):
    """Load a raw little-endian volume described by its JSON sidecar."""
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise FormatError(f"missing sidecar {sidecar}")
    with open(sidecar) as f:
        meta = json.load(f)
    dims = tuple(int(d) for d in meta["dims"])
    dtype_name = meta["dtype"]
    if dtype_name not in _VOLUME_DTYPES:
        raise FormatError(f"unknown dtype {dtype_name!r}")
    dtype = np.dtype(_VOLUME_DTYPES[dtype_name]).newbyteorder("<")
    blob = Path(path).read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"blob length {len(blob)} != dims product x itemsize = {expected}"
        )
    vox = np.frombuffer(blob, dtype=dtype).reshape(dims)
    if dtype_name != "f32":
        vox = vox.astype(np.float32)
    else:
        vox = vox.astype(np.float32, copy=True)
    return Volume(
        dims=dims,
        spacing_um=tuple(meta["spacing_um"]),
        voxels=vox,
        modality=Modality(meta.get("modality", "OTHER")),
    )


def save_section(section, path):
    px = np.asarray(section.pixels, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(px).tobytes())
    meta = {
        "dims": list(section.dims),
        "spacing_um": section.spacing_um,
        "dtype": "f32",
        "channels": 1 if px.ndim == 2 else px.shape[2],
        "section_id": section.section_id,
        "depth_um": section.depth_um,
    }
    with open(_sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=1)


def load_section(path):
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise FormatError(f"missing sidecar {sidecar}")
    with open(sidecar) as f:
        meta = json.load(f)
    w, h = (int(d) for d in meta["dims"])
    channels = int(meta.get("channels", 1))
    blob = Path(path).read_bytes()
    expected = w * h * channels * 4
    if len(blob) != expected:
        raise FormatError(f"blob length {len(blob)} != {expected}")
    shape = (h, w) if channels == 1 else (h, w, channels)
    px = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32, copy=True)
    return SectionImage(
        dims=(w, h),
        spacing_um=meta["spacing_um"],
        pixels=px,
        section_id=meta["section_id"],
        depth_um=meta.get("depth_um"),
    )


# ---------------------------------------------------------------------------
# Checkpoints (manifest-first single file: magic, manifest length, JSON, blob)
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt, path):
    entries = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = dict(ckpt.manifest)
    manifest["tensors"] = entries
    manifest["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(mbytes).to_bytes(8, "little"))
        f.write(mbytes)
        f.write(blob)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CorruptionError("bad checkpoint magic")
    mlen = int.from_bytes(data[8:16], "little")
    try:
        manifest = json.loads(data[16 : 16 + mlen])
    except (ValueError, UnicodeDecodeError) as e:
        raise CorruptionError(f"unreadable manifest: {e}") from None
    blob = data[16 + mlen :]
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CorruptionError("blob digest mismatch")
    tensors = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise CorruptionError(f"tensor {entry['name']} extends past blob end")
        arr = np.frombuffer(blob[start : start + n], dtype=dtype.newbyteorder("<"))
        tensors[entry["name"]] = arr.astype(dtype, copy=True).reshape(entry["shape"])
    meta = {k: v for k, v in manifest.items() if k not in ("tensors", "blob_sha256")}
    return Checkpoint(tensors=tensors, manifest=meta)
