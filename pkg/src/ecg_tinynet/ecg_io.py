"""Recording I/O: header grammar, signal payloads, manifests, splits, cache files.

On-disk layout of a recording ``<id>``::

    <id>.hea   WFDB-style header (record line, one line per lead, comments)
    <id>.dat   int16 samples, lead-interleaved, little-endian ("format 16")
    <id>.f32   or float32 samples, channel-major, little-endian, millivolts

Labels come from a ``#Dx: code[,code...]`` comment mapped through a
:class:`LabelMap`.
"""
from __future__ import annotations

import csv
import io
import logging
import re
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import (ClassTooSmall, DataError, EmptyDataset, MalformedHeader, MissingDx,
                         SizeMismatch, UnknownEncoding)

log = logging.getLogger(__name__)

DEFAULT_GAIN = 1000.0
INT16 = "int16-interleaved"
FLOAT32 = "float32-channel-major"
ENCODINGS = (INT16, FLOAT32)


# ---------------------------------------------------------------------------
# records and labels

@dataclass(frozen=True)
class EcgRecord:
    id: str
    signal: np.ndarray  # (leads, samples) float32, mV
    fs: int
    labels: tuple[int, ...]
    source_fs: int

    def __post_init__(self):
        sig = self.signal
        if sig.ndim != 2 or sig.shape[0] < 1 or sig.shape[1] < 1:
            raise DataError(f"{self.id}: signal must be (leads>=1, samples>=1), got {sig.shape}")
        if not np.all(np.isfinite(sig)):
            raise DataError(f"{self.id}: signal contains non-finite values")
        if self.fs <= 0 or self.source_fs <= 0:
            raise DataError(f"{self.id}: sampling rates must be positive")
        if not self.labels:
            raise DataError(f"{self.id}: at least one label is required")

    @property
    def primary_label(self) -> int:
        return self.labels[0]

    @property
    def duration_s(self) -> float:
        return self.signal.shape[1] / self.fs


@dataclass(frozen=True)
class LabelMap:
    entries: dict[str, tuple[int, str]]
    class_names: tuple[str, ...]

    def __post_init__(self):
        used = sorted({idx for idx, _ in self.entries.values()})
        if used != list(range(len(self.class_names))):
            raise DataError("label map class indices must be contiguous from 0")
        for idx, abbrev in self.entries.values():
            if self.class_names[idx] != abbrev:
                raise DataError(f"label map index {idx} has conflicting names")
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError("label map abbreviations must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def map_codes(self, codes: Iterable[str]) -> tuple[int, ...]:
        """Class indices of the mappable codes, in file order, without repeats."""
        out: list[int] = []
        for code in codes:
            hit = self.entries.get(code.strip())
            if hit is not None and hit[0] not in out:
                out.append(hit[0])
        return tuple(out)

    def code_for(self, class_index: int) -> str:
        for code, (idx, _) in self.entries.items():
            if idx == class_index:
                return code
        raise KeyError(class_index)

    def subset(self, abbrevs: Sequence[str]) -> "LabelMap":
        """Re-index a subset of classes, keeping the given order."""
        entries = {}
        for new_idx, name in enumerate(abbrevs):
            codes = [c for c, (_, a) in self.entries.items() if a == name]
            if not codes:
                raise DataError(f"class {name!r} not in label map")
            entries.update({c: (new_idx, name) for c in codes})
        return LabelMap(entries, tuple(abbrevs))

    @classmethod
    def from_csv(cls, text: str) -> "LabelMap":
        rows = csv.DictReader(line for line in io.StringIO(text) if line.strip() and not line.startswith("#"))
        entries: dict[str, tuple[int, str]] = {}
        names: dict[int, str] = {}
        try:
            for row in rows:
                idx = int(row["index"])
                entries[row["code"].strip()] = (idx, row["abbrev"].strip())
                names.setdefault(idx, row["abbrev"].strip())
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"bad label map: {exc}") from exc
        if not entries:
            raise DataError("label map is empty")
        return cls(entries, tuple(names[i] for i in sorted(names)))

    @classmethod
    def load(cls, path: str | Path) -> "LabelMap":
        return cls.from_csv(Path(path).read_text())

    def to_csv(self) -> str:
        lines = ["code,index,abbrev"]
        lines += [f"{code},{idx},{abbrev}" for code, (idx, abbrev) in
                  sorted(self.entries.items(), key=lambda kv: (kv[1][0], kv[0]))]
        return "\n".join(lines) + "\n"


def default_label_map() -> LabelMap:
    """The nine CPSC 2018 classes: AF, IAVB, LBBB, PAC, PVC, RBBB, SNR, STD, STE."""
    text = resources.files("ecg_tinynet.data").joinpath("labels_cpsc2018.csv").read_text()
    return LabelMap.from_csv(text)


# ---------------------------------------------------------------------------
# header grammar

@dataclass(frozen=True)
class Header:
    record_id: str
    n_leads: int
    fs: int
    n_samples: int
    dx_codes: tuple[str, ...]
    gains: tuple[float, ...] = ()
    lead_names: tuple[str, ...] = ()
    file_names: tuple[str, ...] = ()
    formats: tuple[str, ...] = ()

    def as_tuple(self) -> tuple[str, int, int, int, list[str]]:
        return self.record_id, self.n_leads, self.fs, self.n_samples, list(self.dx_codes)


_GAIN = re.compile(r"^([0-9.eE+-]+)(?:\([-0-9]+\))?(?:/\S+)?$")
_DX = re.compile(r"^#\s*Dx\s*:\s*(.*)$", re.IGNORECASE)


def _positive_int(token: str, what: str) -> int:
    try:
        value = float(token.split("/")[0])
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {token!r}") from None
    if value <= 0 or value != int(value):
        raise MalformedHeader(f"{what} must be a positive integer, got {token!r}")
    return int(value)


def parse_header(text: str) -> Header:
    """Parse the WFDB subset used here: record line, lead lines, ``#Dx:`` comment."""
    lines = [ln.strip() for ln in text.splitlines()]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    comments = [ln for ln in lines if ln.startswith("#")]
    if not body:
        raise MalformedHeader("empty header")
    fields = body[0].split()
    if len(fields) < 4:
        raise MalformedHeader(f"record line needs 4 fields, got {len(fields)}: {body[0]!r}")
    rec_id = fields[0].split("/")[0]
    n_leads = _positive_int(fields[1], "lead count")
    fs = _positive_int(fields[2], "sampling rate")
    n_samples = _positive_int(fields[3], "sample count")

    lead_lines = body[1:1 + n_leads]
    gains, names, files, formats = [], [], [], []
    for ln in lead_lines:
        parts = ln.split()
        files.append(parts[0])
        formats.append(parts[1] if len(parts) > 1 else "16")
        gain = DEFAULT_GAIN
        if len(parts) > 2:
            m = _GAIN.match(parts[2])
            if not m:
                raise MalformedHeader(f"bad gain field {parts[2]!r}")
            gain = float(m.group(1)) or DEFAULT_GAIN
        gains.append(gain)
        names.append(parts[8] if len(parts) > 8 else f"lead{len(names) + 1}")
    if lead_lines and len(lead_lines) != n_leads:
        raise MalformedHeader(f"expected {n_leads} lead lines, found {len(lead_lines)}")

    codes: list[str] | None = None
    for ln in comments:
        m = _DX.match(ln)
        if m:
            codes = [c.strip() for c in m.group(1).split(",") if c.strip()]
            break
    if not codes:
        raise MissingDx(f"{rec_id}: no '#Dx:' line")
    if not gains:
        gains = [DEFAULT_GAIN] * n_leads
    return Header(rec_id, n_leads, fs, n_samples, tuple(codes), tuple(gains), tuple(names),
                  tuple(files), tuple(formats))


def format_header(h: Header) -> str:
    """Emit a header that :func:`parse_header` reads back to the same values."""
    out = [f"{h.record_id} {h.n_leads} {h.fs} {h.n_samples}"]
    gains = h.gains or (DEFAULT_GAIN,) * h.n_leads
    files = h.file_names or (f"{h.record_id}.dat",) * h.n_leads
    formats = h.formats or ("16",) * h.n_leads
    names = h.lead_names or tuple(f"lead{i + 1}" for i in range(h.n_leads))
    for i in range(h.n_leads):
        out.append(f"{files[i]} {formats[i]} {gains[i]:g}/mV 16 0 0 0 0 {names[i]}")
    out.append(f"#Dx: {','.join(h.dx_codes)}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# signal payloads

_ITEM = {INT16: np.dtype("<i2"), FLOAT32: np.dtype("<f4")}


def load_signal(path, lead_count: int, sample_count: int, encoding: str,
                gains: Sequence[float] | None = None) -> np.ndarray:
    """Read a payload as float32 millivolts, shape ``(lead_count, sample_count)``."""
    if encoding not in _ITEM:
        raise UnknownEncoding(f"unknown encoding {encoding!r}; expected one of {ENCODINGS}")
    dtype = _ITEM[encoding]
    expected = lead_count * sample_count * dtype.itemsize
    actual = Path(path).stat().st_size
    if actual != expected:
        raise SizeMismatch(f"{path}: {actual} bytes, expected {expected} "
                           f"({lead_count} leads x {sample_count} samples x {dtype.itemsize})")
    raw = np.fromfile(path, dtype=dtype)
    if encoding == FLOAT32:
        return raw.reshape(lead_count, sample_count).astype(np.float32)
    gains = np.asarray(gains if gains is not None else [DEFAULT_GAIN] * lead_count, dtype=np.float64)
    return (raw.reshape(sample_count, lead_count).T / gains[:, None]).astype(np.float32)


def write_signal(path, signal: np.ndarray, encoding: str, gains: Sequence[float] | None = None) -> None:
    """Inverse of :func:`load_signal` (int16 values are rounded and saturated)."""
    signal = np.asarray(signal)
    if encoding == FLOAT32:
        signal.astype("<f4").tofile(path)
    elif encoding == INT16:
        gains = np.asarray(gains if gains is not None else [DEFAULT_GAIN] * signal.shape[0])
        digital = np.clip(np.round(signal * gains[:, None]), -32768, 32767)
        digital.T.astype("<i2").tofile(path)
    else:
        raise UnknownEncoding(f"unknown encoding {encoding!r}")


def payload_for(header_path: Path, header: Header) -> tuple[Path, str]:
    """Locate the payload file named in the header and pick its encoding."""
    name = header.file_names[0] if header.file_names else f"{header.record_id}.dat"
    path = header_path.parent / name
    suffix = path.suffix.lower()
    if suffix == ".f32":
        return path, FLOAT32
    if suffix == ".mat":
        raise UnknownEncoding(f"{path}: MATLAB payloads must be converted first (see REPRODUCE.md)")
    if (header.formats[0] if header.formats else "16").split("+")[0].split("x")[0] == "16":
        return path, INT16
    raise UnknownEncoding(f"{path}: unsupported sample format {header.formats[0]!r}")


def read_record(header_path, label_map: LabelMap) -> EcgRecord:
    header_path = Path(header_path)
    header = parse_header(header_path.read_text())
    labels = label_map.map_codes(header.dx_codes)
    if not labels:
        raise DataError(f"{header.record_id}: no mappable Dx code in {header.dx_codes}")
    path, encoding = payload_for(header_path, header)
    signal = load_signal(path, header.n_leads, header.n_samples, encoding, header.gains)
    return EcgRecord(header.record_id, signal, header.fs, labels, header.fs)


def write_record(directory, record: EcgRecord, label_map: LabelMap, encoding: str = INT16,
                 lead_names: Sequence[str] | None = None) -> Path:
    """Write ``<id>.hea`` plus payload; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".dat" if encoding == INT16 else ".f32"
    n_leads, n_samples = record.signal.shape
    header = Header(record.id, n_leads, record.fs, n_samples,
                    tuple(label_map.code_for(i) for i in record.labels),
                    (DEFAULT_GAIN,) * n_leads, tuple(lead_names) if lead_names else (),
                    (record.id + ext,) * n_leads, ("16" if encoding == INT16 else "32",) * n_leads)
    write_signal(directory / (record.id + ext), record.signal, encoding, header.gains)
    hea = directory / f"{record.id}.hea"
    hea.write_text(format_header(header))
    return hea


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestRow:
    id: str
    path: str
    labels: tuple[int, ...]
    duration_s: float
    leads: int

    @property
    def primary_label(self) -> int:
        return self.labels[0]


@dataclass
class Manifest:
    rows: list[ManifestRow]
    class_names: tuple[str, ...]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def class_counts(self) -> np.ndarray:
        """Histogram of primary labels."""
        return np.bincount([r.primary_label for r in self.rows], minlength=self.num_classes)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.rows]

    @property
    def primary_labels(self) -> np.ndarray:
        return np.array([r.primary_label for r in self.rows], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, record_id: str) -> ManifestRow:
        for r in self.rows:
            if r.id == record_id:
                return r
        raise KeyError(record_id)

    @classmethod
    def from_labels(cls, ids: Sequence[str], labels: Sequence[int], class_names: Sequence[str]) -> "Manifest":
        rows = [ManifestRow(i, "", (int(lab),), 0.0, 0) for i, lab in zip(ids, labels)]
        return cls(rows, tuple(class_names))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "path", "labels", "duration_s", "leads"])
            for r in self.rows:
                w.writerow([r.id, r.path, ";".join(map(str, r.labels)), f"{r.duration_s:.6g}", r.leads])

    def skipped_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "reason"])
            w.writerows(self.skipped)

    @classmethod
    def from_csv(cls, path, class_names: Sequence[str]) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                try:
                    rows.append(ManifestRow(rec["id"], rec["path"],
                                            tuple(int(v) for v in rec["labels"].split(";") if v),
                                            float(rec["duration_s"]), int(rec["leads"])))
                except (KeyError, ValueError) as exc:
                    raise DataError(f"{path}: bad manifest row {rec}: {exc}") from exc
        if not rows:
            raise EmptyDataset(f"{path}: manifest has no rows")
        return cls(rows, tuple(class_names))


def _scan(header_path: Path, label_map: LabelMap) -> ManifestRow | tuple[str, str]:
    try:
        header = parse_header(header_path.read_text())
        payload, _ = payload_for(header_path, header)
    except DataError as exc:
        return header_path.stem, str(exc)
    if not payload.exists():
        return header.record_id, f"payload missing: {payload.name}"
    labels = label_map.map_codes(header.dx_codes)
    if not labels:
        return header.record_id, f"unmapped codes {','.join(header.dx_codes)}"
    return ManifestRow(header.record_id, str(header_path), labels, header.n_samples / header.fs, header.n_leads)


def build_manifest(data_dir, label_map: LabelMap, workers: int = 4) -> Manifest:
    """Scan ``data_dir`` for headers; rows and skips come back sorted by id."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    headers = sorted(data_dir.glob("*.hea"))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda p: _scan(p, label_map), headers))
    rows = sorted((r for r in results if isinstance(r, ManifestRow)), key=lambda r: r.id)
    skipped = sorted(r for r in results if not isinstance(r, ManifestRow))
    for rec_id, reason in skipped:
        log.warning("skipping %s: %s", rec_id, reason)
    if not rows:
        raise EmptyDataset(f"no mappable records in {data_dir} ({len(skipped)} skipped)")
    return Manifest(rows, label_map.class_names, skipped)


# ---------------------------------------------------------------------------
# splits

HOLDOUT = "holdout"
KFOLD = "kfold"


@dataclass
class SplitPlan:
    seed: int
    mode: str
    assignment: dict[str, str | int]
    folds: int = 10

    def ids_where(self, value) -> list[str]:
        return [i for i, a in self.assignment.items() if a == value]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "assignment"])
            w.writerows(self.assignment.items())

    @classmethod
    def from_csv(cls, path, seed: int = 0) -> "SplitPlan":
        path = Path(path)
        if not path.exists():
            raise DataError(f"split plan not found: {path}")
        with open(path, newline="") as fh:
            pairs = [(r["id"], r["assignment"]) for r in csv.DictReader(fh)]
        if pairs and all(a.isdigit() for _, a in pairs):
            assignment = {i: int(a) for i, a in pairs}
            return cls(seed, KFOLD, assignment, max(assignment.values()) + 1)
        return cls(seed, HOLDOUT, dict(pairs))


def make_splits(manifest: Manifest, seed: int, mode: str = HOLDOUT, folds: int = 10,
                fractions: tuple[float, float] = (0.1, 0.1)) -> SplitPlan:
    """Stratified holdout (80/10/10 by default) or k-fold plan over primary labels."""
    if len(manifest) == 0:
        raise EmptyDataset("cannot split an empty manifest")
    if mode not in (HOLDOUT, KFOLD):
        raise ValueError(f"mode must be {HOLDOUT!r} or {KFOLD!r}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=(7,)))
    by_class: dict[int, list[str]] = {}
    for r in manifest.rows:
        by_class.setdefault(r.primary_label, []).append(r.id)
    assignment: dict[str, str | int] = {}
    offset = 0
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n = len(ids)
        if mode == HOLDOUT:
            n_val = int(round(n * fractions[0]))
            n_test = int(round(n * fractions[1]))
            for k, rec_id in enumerate(ids):
                assignment[rec_id] = "test" if k < n_test else "val" if k < n_test + n_val else "train"
        else:
            if n < folds:
                warnings.warn(f"class {manifest.class_names[cls] if cls < manifest.num_classes else cls} "
                              f"has {n} records for {folds} folds", ClassTooSmall, stacklevel=2)
            for k, rec_id in enumerate(ids):
                assignment[rec_id] = (offset + k) % folds
            offset += n
    ordered = {i: assignment[i] for i in manifest.ids}
    return SplitPlan(int(seed), mode, ordered, folds)


# ---------------------------------------------------------------------------
# preprocessed cache

CACHE_MAGIC = b"ECGS"
CACHE_VERSION = 1
_CACHE_HEAD = struct.Struct("<4sIHII")


def write_cache(path, signal: np.ndarray, fs: int) -> None:
    signal = np.asarray(signal, dtype="<f4")
    if signal.ndim != 2:
        raise DataError("cache signal must be (leads, samples)")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEAD.pack(CACHE_MAGIC, CACHE_VERSION, signal.shape[0], signal.shape[1], int(fs)))
        fh.write(np.ascontiguousarray(signal).tobytes())


def read_cache(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEAD.size:
        raise SizeMismatch(f"{path}: truncated cache header")
    magic, version, leads, samples, fs = _CACHE_HEAD.unpack_from(raw)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise DataError(f"{path}: not an ECGS v1 cache file")
    payload = raw[_CACHE_HEAD.size:]
    if len(payload) != leads * samples * 4:
        raise SizeMismatch(f"{path}: payload {len(payload)} bytes, expected {leads * samples * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(leads, samples).astype(np.float32), fs

