"""Loading, validating and exporting spatial datasets."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .kriging import SpatialDataset

log = logging.getLogger(__name__)

Column = Union[str, int]


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class AffineMap:
    """Per-axis map ``unit = (raw - offset) / scale`` onto the unit square.

    A single common scale keeps distances isotropic, so bandwidths and
    ranges measured after rescaling are in units of the longer bounding-box
    side.
    """

    offset: tuple[float, float]
    scale: float

    def to_unit(self, coords) -> np.ndarray:
        return (np.asarray(coords, dtype=float) - np.asarray(self.offset)) / self.scale

    def from_unit(self, coords) -> np.ndarray:
        return np.asarray(coords, dtype=float) * self.scale + np.asarray(self.offset)


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_accepted: int = 0
    rows_rejected: int = 0
    rejections: list = field(default_factory=list)
    bounding_box: Optional[tuple] = None
    response_summary: Optional[dict] = None
    centering_offset: float = 0.0
    rescale: Optional[AffineMap] = None
    distance_units: str = "raw coordinates"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rescale"] = None if self.rescale is None else asdict(self.rescale)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _resolve(header: list[str], col: Column) -> int:
    if isinstance(col, int):
        if not 0 <= col < len(header):
            raise IngestError(f"column index {col} out of range")
        return col
    if col in header:
        return header.index(col)
    raise IngestError(f"missing column {col!r}; have {header}")


def load_csv(
    path,
    x: Column = "s_x",
    y: Column = "s_y",
    response: Column = "y",
    rescale: bool = False,
) -> tuple[SpatialDataset, IngestReport]:
    """Read a CSV with a header row into a :class:`SpatialDataset`.

    Rows with unparsable or non-finite values are rejected and listed in
    the report. With ``rescale=True`` coordinates are mapped affinely into
    the unit square and the map is recorded.
    """
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    report = IngestReport()
    rows = []
    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path} is empty") from None
        cols = [_resolve(header, c) for c in (x, y, response)]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            report.rows_read += 1
            try:
                vals = [float(row[c]) for c in cols]
            except (IndexError, ValueError) as exc:
                reason = f"line {lineno}: unparsable ({exc})"
            else:
                if all(math.isfinite(v) for v in vals):
                    rows.append(vals)
                    continue
                reason = f"line {lineno}: non-finite value"
            report.rejections.append(reason)
            log.warning("rejected %s", reason)
    report.rows_accepted = len(rows)
    report.rows_rejected = report.rows_read - report.rows_accepted
    if not rows:
        raise IngestError(f"no valid rows in {path}")
    arr = np.asarray(rows)
    locs, resp = arr[:, :2], arr[:, 2]
    report.bounding_box = (float(locs[:, 0].min()), float(locs[:, 1].min()), float(locs[:, 0].max()), float(locs[:, 1].max()))
    if rescale:
        amap = unit_square_map(locs)
        locs = amap.to_unit(locs)
        report.rescale = amap
        report.distance_units = "unit-square coordinates (bandwidths and ranges are post-rescale)"
    report.response_summary = {
        "mean": float(resp.mean()),
        "std": float(resp.std(ddof=1)) if resp.size > 1 else 0.0,
        "min": float(resp.min()),
        "max": float(resp.max()),
    }
    return SpatialDataset(locs, resp), report


def unit_square_map(locations) -> AffineMap:
    locs = np.asarray(locations, dtype=float)
    lo = locs.min(axis=0)
    span = float((locs.max(axis=0) - lo).max())
    return AffineMap((float(lo[0]), float(lo[1])), span if span > 0 else 1.0)


def write_csv(data: SpatialDataset, path) -> None:
    """Write ``s_x, s_y, y`` with round-trip exact float formatting."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s_x", "s_y", "y"])
        for (sx, sy), v in zip(data.locations, data.responses):
            writer.writerow([repr(float(sx)), repr(float(sy)), repr(float(v))])


def split_holdout(n: int, n_validation: int, n_test: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint train / validation / test index sets, uniform without replacement."""
    if min(n, n_validation, n_test) < 0:
        raise ValueError("sizes must be non-negative")
    if n_validation + n_test > n:
        raise ValueError(f"n_validation + n_test = {n_validation + n_test} exceeds n = {n}")
    perm = np.random.default_rng(seed).permutation(n)
    validation = np.sort(perm[:n_validation])
    test = np.sort(perm[n_validation : n_validation + n_test])
    train = np.sort(perm[n_validation + n_test :])
    return train, validation, test


def center(data: SpatialDataset) -> tuple[SpatialDataset, float]:
    """Subtract the sample mean; returns the centered data and the offset removed."""
    offset = float(np.mean(data.responses))
    return data.shifted(-offset), offset


def uncenter(values, offset: float):
    return np.asarray(values, dtype=float) + offset
