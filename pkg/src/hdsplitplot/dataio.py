"""CSV ingestion and serialization.

Sample files carry the header ``group,y1,...,yd`` with one subject per row;
group labels are the consecutive integers 1..a.  Matrix files are headerless
CSV of reals, row-major.  Lines starting with ``#`` are metadata comments
and are skipped everywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .model import SplitPlotSample


class DataFormatError(ValueError):
    """An input file does not match its documented format."""


def _data_lines(path: str | Path) -> list[tuple[int, str]]:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            out.append((lineno, stripped))
    return out


def read_sample_csv(path: str | Path) -> SplitPlotSample:
    """Read an observation file into a sample, grouped by label."""
    lines = _data_lines(path)
    if not lines:
        raise DataFormatError(f"{path}: file is empty")
    header_no, header = lines[0]
    cols = [c.strip() for c in header.split(",")]
    d = len(cols) - 1
    if d < 1 or cols[0] != "group" or cols[1:] != [f"y{t}" for t in range(1, d + 1)]:
        raise DataFormatError(
            f"{path}:{header_no}: header must be 'group,y1,...,yd', got {header!r}"
        )
    by_label: dict[int, list[np.ndarray]] = {}
    for lineno, line in lines[1:]:
        parts = line.split(",")
        if len(parts) != d + 1:
            raise DataFormatError(
                f"{path}:{lineno}: expected {d + 1} cells, got {len(parts)}"
            )
        try:
            label = int(parts[0])
        except ValueError as exc:
            raise DataFormatError(
                f"{path}:{lineno}: group label {parts[0]!r} is not an integer"
            ) from exc
        if label < 1:
            raise DataFormatError(f"{path}:{lineno}: group labels must be positive")
        values = np.empty(d)
        for col, cell in enumerate(parts[1:], start=1):
            try:
                values[col - 1] = float(cell)
            except ValueError as exc:
                raise DataFormatError(
                    f"{path}:{lineno}: column y{col} holds non-numeric cell {cell!r}"
                ) from exc
        by_label.setdefault(label, []).append(values)
    labels = sorted(by_label)
    if labels != list(range(1, len(labels) + 1)):
        raise DataFormatError(
            f"{path}: group labels must be consecutive 1..a, found {labels}"
        )
    small = [lab for lab in labels if len(by_label[lab]) < 2]
    if small:
        warnings.warn(
            f"{path}: groups {small} have fewer than 2 subjects; "
            "most estimators will be unavailable",
            stacklevel=2,
        )
    return SplitPlotSample([np.vstack(by_label[lab]) for lab in labels])


def write_sample_csv(
    s: SplitPlotSample, path: str | Path, seed: int | None = None
) -> None:
    """Write a sample in the ingestion format; floats round-trip exactly."""
    with open(path, "w") as fh:
        meta = f"# hdsplitplot={__version__}"
        if seed is not None:
            meta += f" seed={seed}"
        fh.write(meta + "\n")
        fh.write("group," + ",".join(f"y{t}" for t in range(1, s.d + 1)) + "\n")
        for label, group in enumerate(s.groups, start=1):
            for row in group:
                fh.write(f"{label}," + ",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path: str | Path) -> np.ndarray:
    """Headerless CSV of reals, row-major."""
    lines = _data_lines(path)
    if not lines:
        raise DataFormatError(f"{path}: file is empty")
    rows = []
    width = None
    for lineno, line in lines:
        parts = line.split(",")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise DataFormatError(
                f"{path}:{lineno}: expected {width} cells, got {len(parts)}"
            )
        try:
            rows.append([float(c) for c in parts])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-numeric cell") from exc
    m = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(m)):
        raise DataFormatError(f"{path}: matrix has non-finite entries")
    return m


def write_matrix_csv(m: np.ndarray, path: str | Path) -> None:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    with open(path, "w") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


@dataclass
class AnalysisConfig:
    """Single-dataset analysis settings, fileable as ``key = value`` lines."""

    data: str = ""
    hypothesis: str = "time"
    subplot: str = ""
    tw: str = ""
    ts: str = ""
    alpha: float = 0.05
    b_draws: int | None = None
    correction: bool = True
    mode: str = "efficient"
    dof_estimator: str = "c5"
    seed: int = 0
    out: str = ""

    _INT_KEYS = ("seed",)
    _FLOAT_KEYS = ("alpha",)
    _BOOL_KEYS = ("correction",)


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines (comments with #) into a flat dict."""
    out: dict[str, str] = {}
    for lineno, line in _data_lines(path):
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def analysis_config_from(mapping: dict[str, str]) -> AnalysisConfig:
    cfg = AnalysisConfig()
    for key, value in mapping.items():
        if not hasattr(cfg, key):
            raise DataFormatError(f"unknown config key {key!r}")
        if key in cfg._INT_KEYS:
            setattr(cfg, key, int(value))
        elif key in cfg._FLOAT_KEYS:
            setattr(cfg, key, float(value))
        elif key in cfg._BOOL_KEYS:
            setattr(cfg, key, value.lower() in ("1", "true", "yes", "on"))
        elif key == "b_draws":
            setattr(cfg, key, int(value))
        else:
            setattr(cfg, key, value)
    return cfg
