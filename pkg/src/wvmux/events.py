"""Columnar photon-event tables and the CSV event-file format.

File layout: header ``shot,arm,basis,port,ix,iy,t_us``, one record per hit,
``arm`` in {w, r}, ``port`` in {+, -}. A sidecar with the same stem and a
``.meta`` suffix holds ``key = value`` run metadata. Files ending in ``.gz``
are read and written through gzip.
"""

from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .core import Arm, PhotonHit

HEADER = "shot,arm,basis,port,ix,iy,t_us"
COLUMNS = HEADER.split(",")

WRITE, READ = 0, 1


class EventFormatError(ValueError):
    """Schema violation in an event file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class EventTable:
    """Photon hits as parallel arrays; ``arm`` is 0 (write) or 1 (read)."""

    shot: np.ndarray
    arm: np.ndarray
    basis: np.ndarray
    port: np.ndarray
    ix: np.ndarray
    iy: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.shot = np.asarray(self.shot, dtype=np.int64)
        self.arm = np.asarray(self.arm, dtype=np.int8)
        self.basis = np.asarray(self.basis, dtype=np.int32)
        self.port = np.asarray(self.port, dtype=np.int8)
        self.ix = np.asarray(self.ix, dtype=np.int32)
        self.iy = np.asarray(self.iy, dtype=np.int32)
        self.t = np.asarray(self.t, dtype=np.float64)
        n = len(self.shot)
        if any(len(getattr(self, c)) != n for c in ("arm", "basis", "port", "ix", "iy", "t")):
            raise ValueError("event columns differ in length")

    @classmethod
    def empty(cls) -> "EventTable":
        return cls(*([np.zeros(0)] * 7))

    @classmethod
    def concat(cls, tables) -> "EventTable":
        tables = list(tables)
        if not tables:
            return cls.empty()
        return cls(*(np.concatenate([getattr(t, c) for t in tables]) for c in _FIELDS))

    @classmethod
    def from_hits(cls, hits) -> "EventTable":
        hits = list(hits)
        return cls(
            [h.shot_id for h in hits],
            [WRITE if h.arm is Arm.WRITE else READ for h in hits],
            [h.basis_index for h in hits],
            [h.port for h in hits],
            [h.ix for h in hits],
            [h.iy for h in hits],
            [h.storage_time for h in hits],
        )

    def to_hits(self) -> list[PhotonHit]:
        arms = (Arm.WRITE, Arm.READ)
        return [
            PhotonHit(int(s), arms[a], int(b), int(p), int(x), int(y), float(t))
            for s, a, b, p, x, y, t in zip(self.shot, self.arm, self.basis, self.port, self.ix, self.iy, self.t)
        ]

    def __len__(self) -> int:
        return len(self.shot)

    def take(self, idx) -> "EventTable":
        return EventTable(*(getattr(self, c)[idx] for c in _FIELDS))

    def sorted(self) -> "EventTable":
        """Sort by (shot, arm) and then by the remaining columns for a canonical order."""
        order = np.lexsort((self.port, self.ix, self.iy, self.arm, self.shot))
        return self.take(order)

    def equals(self, other: "EventTable") -> bool:
        return len(self) == len(other) and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in _FIELDS)


_FIELDS = ("shot", "arm", "basis", "port", "ix", "iy", "t")


def _open_text(path: Path, mode: str):
    if str(path).endswith(".gz"):
        # fixed mtime and no embedded name keep gzip output byte-stable
        raw = open(path, mode.replace("t", "") + "b")
        gz = gzip.GzipFile(filename="", fileobj=raw, mode=mode.replace("t", "") + "b", mtime=0)
        return io.TextIOWrapper(gz, encoding="utf-8", newline="\n")
    return open(path, mode, encoding="utf-8", newline="\n")


def format_float(v: float) -> str:
    return repr(float(v))


class EventWriter:
    """Append event tables to a file in order; use as a context manager."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = None
        self.records = 0

    def __enter__(self) -> "EventWriter":
        self._fh = _open_text(self.path, "wt")
        self._fh.write(HEADER + "\n")
        return self

    def __exit__(self, *exc) -> None:
        self._fh.close()

    def write(self, events: EventTable) -> None:
        t_text = {v: format_float(v) for v in np.unique(events.t).tolist()}
        arm = np.array(["w", "r"])[events.arm]
        port = np.where(events.port > 0, "+", "-")
        chunk = 200_000
        for lo in range(0, len(events), chunk):
            hi = min(lo + chunk, len(events))
            rows = zip(
                events.shot[lo:hi].tolist(),
                arm[lo:hi].tolist(),
                events.basis[lo:hi].tolist(),
                port[lo:hi].tolist(),
                events.ix[lo:hi].tolist(),
                events.iy[lo:hi].tolist(),
                events.t[lo:hi].tolist(),
            )
            self._fh.write("".join(f"{s},{a},{b},{p},{x},{y},{t_text[t]}\n" for s, a, b, p, x, y, t in rows))
        self.records += len(events)


def write_events(path, events: EventTable) -> None:
    with EventWriter(path) as w:
        w.write(events)


def read_events(path, width_px: int | None = None, height_px: int | None = None) -> EventTable:
    """Read and validate an event file; raises :class:`EventFormatError`."""
    path = Path(path)
    with _open_text(path, "rt") as fh:
        header = fh.readline().rstrip("\n")
        if header != HEADER:
            raise EventFormatError(f"expected header {HEADER!r}, got {header!r}", 1)
        try:
            df = pd.read_csv(fh, header=None, names=COLUMNS, dtype=str, keep_default_na=False)
        except pd.errors.ParserError as exc:
            raise EventFormatError(f"malformed record ({exc})") from exc
    if len(df) == 0:
        return EventTable.empty()

    bad = np.zeros(len(df), dtype=bool)
    reasons = np.full(len(df), "", dtype=object)

    def flag(mask, why):
        new = mask & ~bad
        reasons[new] = why
        bad[:] = bad | mask

    ints = {}
    for c in ("shot", "basis", "ix", "iy"):
        v = pd.to_numeric(df[c], errors="coerce")
        flag(v.isna().to_numpy() | (v.to_numpy() % 1 != 0), f"{c} is not an integer")
        ints[c] = np.nan_to_num(v.to_numpy(dtype=float), nan=-1).astype(np.int64)
    t = pd.to_numeric(df["t_us"], errors="coerce").to_numpy(dtype=float)
    flag(~np.isfinite(t) | (t < 0), "t_us must be a nonnegative number")
    arm_s = df["arm"].to_numpy()
    port_s = df["port"].to_numpy()
    flag(~np.isin(arm_s, ["w", "r"]), "arm must be 'w' or 'r'")
    flag(~np.isin(port_s, ["+", "-"]), "port must be '+' or '-'")
    flag(ints["shot"] < 0, "shot must be nonnegative")
    flag(ints["basis"] < 0, "basis must be nonnegative")
    flag((ints["ix"] < 0) | (ints["iy"] < 0), "pixel index must be nonnegative")
    if width_px is not None:
        flag(ints["ix"] >= width_px, "ix outside the pixel grid")
    if height_px is not None:
        flag(ints["iy"] >= height_px, "iy outside the pixel grid")
    arm = (arm_s == "r").astype(np.int8)
    key = ints["shot"] * 2 + arm
    flag(np.r_[False, np.diff(key) < 0], "records not sorted by (shot, arm)")
    if bad.any():
        i = int(np.argmax(bad))
        raise EventFormatError(reasons[i], i + 2)
    # numpy's str -> float goes through the correctly rounded Python parser
    t = df["t_us"].to_numpy().astype(np.float64)
    return EventTable(ints["shot"], arm, ints["basis"], np.where(port_s == "+", 1, -1), ints["ix"], ints["iy"], t)


def meta_path(path) -> Path:
    path = Path(path)
    name = path.name[:-3] if path.name.endswith(".gz") else path.name
    stem = name.rsplit(".", 1)[0] if "." in name else name
    return path.with_name(stem + ".meta")


def write_keyvalue(path, items: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {v}\n")


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def atomic_write(path, writer) -> None:
    """Run ``writer(tmp_path)`` and move the result into place; clean up on failure."""
    path = Path(path)
    tmp = path.with_name(".part-" + path.name)  # keeps the suffix, so .gz still compresses
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
