"""On-disk cohort bundle.

Layout::

    manifest.json            index, generator config, hashes, ground truth
    records.csv              one row per scan (clinical + derived scalars)
    scans/<scan_id>/*.f32    ring profiles and ring-level shadow flags
    grids/<scan_id>/*.f32    processed superpixel grids (after ``maps``)
    norms/*.f32              normative grids (after ``maps``)

Arrays are raw little-endian float32, row-major. Every array is listed in
``manifest["arrays"]`` with its dims and SHA-256 digest and is verified on
read.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import IntegrityError, PreconditionError

FORMAT_VERSION = "1.0"
SUPPORTED_MAJOR = 1

RECORD_COLUMNS = (
    "scan_id", "subject_id", "eye", "scan_index", "group", "label", "age", "gender",
    "axial_length", "vf_md", "disc_area", "rim_area", "cd_area_ratio", "vcdr", "gcc_sup",
    "gcc_inf", "gcc_flv", "rnfl_avg", "rnfl_flv",
)
DERIVED_COLUMNS = ("nflr_avg", "nflr_flv")
_INT_COLUMNS = {"scan_index", "label", "gender"}
_STR_COLUMNS = {"scan_id", "subject_id", "eye", "group"}


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dump_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def check_format_version(version):
    try:
        major = int(str(version).split(".")[0])
    except ValueError:
        major = -1
    if major != SUPPORTED_MAJOR:
        raise PreconditionError(
            f"bundle format version {version!r} is not supported (need {SUPPORTED_MAJOR}.x)"
        )


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_records(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_value(row[c]) for c in columns])


def read_records(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k in _STR_COLUMNS:
                    row[k] = v
                elif k in _INT_COLUMNS:
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows, list(reader.fieldnames or [])


class Bundle:
    """Reader/writer for one bundle directory.

    With ``audit=True`` every array read is logged in ``self.accessed``.
    """

    def __init__(self, root, audit=False):
        self.root = Path(root)
        self.audit = audit
        self.accessed: list[str] = []
        self._manifest = None

    # -------------------------------------------------------------- manifest

    @property
    def manifest_path(self):
        return self.root / "manifest.json"

    @property
    def manifest(self):
        if self._manifest is None:
            if not self.manifest_path.is_file():
                raise PreconditionError(f"{self.root} is not a cohort bundle (no manifest.json)")
            self._manifest = json.loads(self.manifest_path.read_text())
            check_format_version(self._manifest.get("format_version"))
        return self._manifest

    def set_manifest(self, doc):
        self._manifest = doc

    def save_manifest(self):
        dump_json(self.manifest_path, self.manifest)

    # -------------------------------------------------------------- arrays

    def write_array(self, rel, array, dims=None, units=None, extra=None):
        arr = np.ascontiguousarray(array, dtype="<f4")
        data = arr.tobytes()
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        entry = {
            "dims": list(dims if dims is not None else arr.shape),
            "dtype": "<f4",
            "order": "row-major",
            "sha256": sha256_bytes(data),
        }
        if units is not None:
            entry["units"] = units
        if extra:
            entry.update(extra)
        self.manifest.setdefault("arrays", {})[rel] = entry
        return entry

    def read_array(self, rel):
        entry = self.manifest.get("arrays", {}).get(rel)
        if entry is None:
            raise PreconditionError(f"array {rel} is not listed in {self.manifest_path}")
        path = self.root / rel
        if not path.is_file():
            raise IntegrityError(f"missing array file {path}")
        data = path.read_bytes()
        if self.audit:
            self.accessed.append(rel)
        expected = 4 * int(np.prod(entry["dims"]))
        if len(data) != expected:
            raise IntegrityError(f"{path}: {len(data)} bytes, expected {expected}")
        if sha256_bytes(data) != entry["sha256"]:
            raise IntegrityError(f"{path}: content hash mismatch")
        return np.frombuffer(data, dtype="<f4").reshape(entry["dims"]).astype(np.float64)

    def verify(self):
        """Check every listed array; returns the number verified."""
        for rel in self.manifest.get("arrays", {}):
            audit, self.audit = self.audit, False
            try:
                self.read_array(rel)
            finally:
                self.audit = audit
        return len(self.manifest.get("arrays", {}))

    def drop_arrays(self, prefix):
        arrays = self.manifest.get("arrays", {})
        for rel in [k for k in arrays if k.startswith(prefix)]:
            del arrays[rel]
            try:
                os.remove(self.root / rel)
            except FileNotFoundError:
                pass

    # -------------------------------------------------------------- records

    @property
    def records_path(self):
        return self.root / "records.csv"

    def read_records(self):
        if not self.records_path.is_file():
            raise PreconditionError(f"{self.records_path} is missing")
        rows, _ = read_records(self.records_path)
        return rows

    def write_records(self, rows, columns):
        write_records(self.records_path, rows, columns)
        data = self.records_path.read_bytes()
        self.manifest["records"] = {"file": "records.csv", "sha256": sha256_bytes(data),
                                    "columns": list(columns)}

    # -------------------------------------------------------------- scans

    def scans(self):
        return self.manifest["scans"]

    def has_grids(self):
        return "maps" in self.manifest


def scan_files(scan_id):
    base = f"scans/{scan_id}"
    return {
        "nfl_band_sum": f"{base}/nfl_band_sum.f32",
        "ppec_band_mean": f"{base}/ppec_band_mean.f32",
        "nfl_thickness": f"{base}/nfl_thickness.f32",
        "shadow": f"{base}/shadow.f32",
    }


def grid_files(scan_id):
    base = f"grids/{scan_id}"
    return {
        "thickness": f"{base}/thickness.f32",
        "thickness_counts": f"{base}/thickness_counts.f32",
        "reflectance": f"{base}/reflectance.f32",
        "reflectance_counts": f"{base}/reflectance_counts.f32",
    }


NORM_FILES = {
    (kind, part): f"norms/{kind}_{part}.f32"
    for kind in ("thickness_um", "reflectance_db")
    for part in ("mean", "sd", "cutoff")
}
