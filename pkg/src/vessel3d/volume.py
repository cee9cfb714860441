"""3D volumes, lung masks, and voxel annotations with their on-disk formats.

Volumes are stored on disk as a MetaImage-style text header (``.mhd``) plus a
raw little-endian payload in x-fastest raster order. Internally the payload
lives in a C-contiguous float32 array of shape ``(nz, ny, nx)``, which has the
same x-fastest memory layout (flat index ``x + nx * (y + ny * z)``).

Annotations are CSV files with the header ``volume_id,x,y,z,label`` and
0-based voxel indices.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

# MHD element types supported for raw payloads (all little-endian on disk).
ELEMENT_DTYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("<u1"),
    "MET_FLOAT": np.dtype("<f4"),
}

# Header keys the reader acts on; anything else is ignored with a warning.
_HONORED_KEYS = {"NDims", "DimSize", "ElementType", "ElementDataFile"}


@dataclass(frozen=True)
class Volume3:
    """A 3D scalar grid with optional binary mask.

    ``data`` has shape ``(nz, ny, nx)`` float32; ``mask`` (when present) is a
    boolean array of the same shape, True inside the region of interest.
    Instances are immutable after construction and safe to share across
    threads.
    """

    data: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got ndim={data.ndim}")
        if min(data.shape) < 1:
            raise ValidationError(f"volume dims must be positive, got {self.dims}")
        if not np.isfinite(data).all():
            raise ValidationError("volume contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if self.mask is not None:
            mask = np.ascontiguousarray(self.mask, dtype=bool)
            if mask.shape != data.shape:
                raise ValidationError(
                    f"mask shape {mask.shape} does not match volume shape {data.shape}"
                )
            mask.flags.writeable = False
            object.__setattr__(self, "mask", mask)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Voxel counts as (nx, ny, nz)."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def num_voxels(self) -> int:
        return self.data.size

    def in_bounds(self, x: int, y: int, z: int) -> bool:
        nx, ny, nz = self.dims
        return 0 <= x < nx and 0 <= y < ny and 0 <= z < nz

    def in_mask(self, x: int, y: int, z: int) -> bool:
        """True when (x, y, z) is inside bounds and inside the mask (if any)."""
        if not self.in_bounds(x, y, z):
            return False
        return self.mask is None or bool(self.mask[z, y, x])


class Annotation(NamedTuple):
    volume_id: str
    x: int
    y: int
    z: int
    label: int


@dataclass
class AnnotationSet:
    """Labeled voxels across one or more volumes (label 1 = vessel)."""

    entries: list[Annotation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def for_volume(self, volume_id: str) -> list[Annotation]:
        return [e for e in self.entries if e.volume_id == volume_id]

    def volume_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.volume_id, None)
        return list(seen)


def read_volume(meta_path: str | Path) -> Volume3:
    """Load an ``.mhd`` header and its raw payload into a float32 Volume3.

    The header must declare ``NDims = 3`` and one of the supported element
    types; the raw file size must match the declared dims exactly.
    """
    meta_path = Path(meta_path)
    if not meta_path.is_file():
        raise ValidationError(f"header file not found: {meta_path}")
    header = _parse_mhd_header(meta_path)

    ndims = header.get("NDims")
    if ndims is None or ndims.strip() != "3":
        raise ValidationError(f"{meta_path}: NDims must be 3, got {ndims!r}")
    dim_size = header.get("DimSize")
    if dim_size is None:
        raise ValidationError(f"{meta_path}: missing DimSize")
    try:
        nx, ny, nz = (int(t) for t in dim_size.split())
    except ValueError as exc:
        raise ValidationError(f"{meta_path}: bad DimSize {dim_size!r}") from exc
    if min(nx, ny, nz) < 1:
        raise ValidationError(f"{meta_path}: non-positive DimSize {dim_size!r}")

    elem = header.get("ElementType", "").strip()
    if elem not in ELEMENT_DTYPES:
        raise ValidationError(
            f"{meta_path}: unsupported ElementType {elem!r} "
            f"(supported: {sorted(ELEMENT_DTYPES)})"
        )
    dtype = ELEMENT_DTYPES[elem]

    data_file = header.get("ElementDataFile", "").strip()
    if not data_file or data_file.upper() in ("LOCAL", "LIST"):
        raise ValidationError(
            f"{meta_path}: ElementDataFile must name a raw file, got {data_file!r}"
        )
    raw_path = meta_path.parent / data_file
    if not raw_path.is_file():
        raise ValidationError(f"raw payload not found: {raw_path}")

    expected_bytes = nx * ny * nz * dtype.itemsize
    actual_bytes = raw_path.stat().st_size
    if actual_bytes != expected_bytes:
        raise ValidationError(
            f"{raw_path}: payload size {actual_bytes} bytes does not match "
            f"DimSize {nx}x{ny}x{nz} ({expected_bytes} bytes expected)"
        )

    raw = np.fromfile(raw_path, dtype=dtype)
    data = raw.reshape(nz, ny, nx).astype(np.float32)
    if not np.isfinite(data).all():
        raise ValidationError(f"{raw_path}: payload contains non-finite values")
    return Volume3(data=data)


def write_volume(vol: Volume3, meta_path: str | Path, element_type: str = "MET_FLOAT") -> None:
    """Write ``vol`` as an ``.mhd`` header plus raw payload next to it.

    Integer element types require the data to be integral and in range so the
    write→read roundtrip is bit-exact.
    """
    if element_type not in ELEMENT_DTYPES:
        raise ValidationError(f"unsupported element type {element_type!r}")
    dtype = ELEMENT_DTYPES[element_type]
    meta_path = Path(meta_path)
    raw_name = meta_path.with_suffix(".raw").name

    data = vol.data
    if dtype.kind in "iu":
        rounded = np.rint(data)
        info = np.iinfo(dtype)
        if not np.array_equal(rounded, data):
            raise ValidationError(f"data is not integral; cannot write as {element_type}")
        if data.min() < info.min or data.max() > info.max:
            raise ValidationError(f"data out of range for {element_type}")
    payload = np.ascontiguousarray(data, dtype=dtype)

    nx, ny, nz = vol.dims
    header_text = (
        "NDims = 3\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementType = {element_type}\n"
        f"ElementDataFile = {raw_name}\n"
    )
    try:
        meta_path.write_text(header_text, encoding="utf-8")
        payload.tofile(meta_path.parent / raw_name)
    except OSError as exc:
        raise OSError(f"failed to write volume to {meta_path}: {exc}") from exc


def attach_mask(vol: Volume3, mask_vol: Volume3) -> Volume3:
    """Return ``vol`` with mask = (mask_vol != 0) per voxel."""
    if mask_vol.dims != vol.dims:
        raise ValidationError(
            f"mask dims {mask_vol.dims} do not match volume dims {vol.dims}"
        )
    return Volume3(data=vol.data, mask=mask_vol.data != 0)


def read_annotations(csv_path: str | Path) -> AnnotationSet:
    """Parse an annotation CSV (``volume_id,x,y,z,label`` header, 0-based).

    Rejects malformed rows, labels outside {0, 1}, negative coordinates, and
    duplicate (volume_id, x, y, z) tuples. Bounds and mask membership are
    checked later against the volumes via :func:`validate_annotations`.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise ValidationError(f"annotation file not found: {csv_path}")
    entries: list[Annotation] = []
    seen: set[tuple[str, int, int, int]] = set()
    with open(csv_path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["volume_id", "x", "y", "z", "label"]:
            raise ValidationError(
                f"{csv_path}: expected header 'volume_id,x,y,z,label', got {header!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise ValidationError(f"{csv_path}:{lineno}: expected 5 fields, got {len(row)}")
            volume_id = row[0].strip()
            if not volume_id:
                raise ValidationError(f"{csv_path}:{lineno}: empty volume_id")
            try:
                x, y, z, label = (int(t) for t in row[1:])
            except ValueError as exc:
                raise ValidationError(f"{csv_path}:{lineno}: non-integer field") from exc
            if label not in (0, 1):
                raise ValidationError(f"{csv_path}:{lineno}: invalid label {label} (must be 0 or 1)")
            if min(x, y, z) < 0:
                raise ValidationError(f"{csv_path}:{lineno}: negative coordinate")
            key = (volume_id, x, y, z)
            if key in seen:
                raise ValidationError(f"{csv_path}:{lineno}: duplicate voxel {key}")
            seen.add(key)
            entries.append(Annotation(volume_id, x, y, z, label))
    logger.info("read %d annotations from %s", len(entries), csv_path)
    return AnnotationSet(entries=entries)


def write_annotations(annotations: AnnotationSet | Iterable[Annotation], csv_path: str | Path) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["volume_id", "x", "y", "z", "label"])
        for e in annotations:
            writer.writerow([e.volume_id, e.x, e.y, e.z, e.label])


def invalid_annotations(
    annotations: AnnotationSet, volumes: Mapping[str, Volume3]
) -> list[Annotation]:
    """Entries that fall outside their volume's dims or outside its mask.

    Entries referencing a volume_id absent from ``volumes`` are skipped; only
    entries that can be checked are judged.
    """
    bad = []
    for e in annotations:
        vol = volumes.get(e.volume_id)
        if vol is None:
            continue
        if not vol.in_mask(e.x, e.y, e.z):
            bad.append(e)
    return bad


def validate_annotations(annotations: AnnotationSet, volumes: Mapping[str, Volume3]) -> None:
    """Raise ValidationError if any entry lies outside dims or mask."""
    bad = invalid_annotations(annotations, volumes)
    if bad:
        preview = ", ".join(f"{e.volume_id}({e.x},{e.y},{e.z})" for e in bad[:5])
        raise ValidationError(
            f"{len(bad)} annotation(s) outside volume bounds or mask: {preview}"
        )


def _parse_mhd_header(meta_path: Path) -> dict[str, str]:
    header: dict[str, str] = {}
    ignored: list[str] = []
    for line in meta_path.read_text(encoding="utf-8-sig").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{meta_path}: malformed header line {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        header[key] = value
        if key not in _HONORED_KEYS:
            ignored.append(key)
    if ignored:
        logger.warning("%s: ignoring unsupported header keys: %s", meta_path, ", ".join(ignored))
    # A big-endian or compressed payload would be silently misread; refuse.
    if header.get("BinaryDataByteOrderMSB", "False").strip().lower() == "true":
        raise ValidationError(f"{meta_path}: big-endian payloads are not supported")
    if header.get("CompressedData", "False").strip().lower() == "true":
        raise ValidationError(f"{meta_path}: compressed payloads are not supported")
    return header
