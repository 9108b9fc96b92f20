"""Figures rendered from study CSV files.

One call turns an appended study file into PNG figures next to it: a
rejection-rate-versus-dimension panel for null studies and one
power-versus-shift panel per dimension for power studies.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_TEST_LABELS = {"phi_star": "estimated-df test", "psi_z": "normal test",
                "psi_chi": "chi-square(1) test"}
_TEST_ORDER = ("phi_star", "psi_z", "psi_chi")


def _read_study(path: str | Path) -> list[dict]:
    rows = []
    header: list[str] | None = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if header is None:
            header = parts
            continue
        row = dict(zip(header, parts))
        row["d"] = int(row["d"])
        row["delta"] = float(row["delta"])
        row["rate"] = float(row["rate"])
        row["se"] = float(row["se"])
        rows.append(row)
    return rows


def study_report(study_csv: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render figures for every hypothesis in the study file; returns paths."""
    study_csv = Path(study_csv)
    out_dir = Path(out_dir) if out_dir is not None else study_csv.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = _read_study(study_csv)
    if not rows:
        raise ValueError(f"{study_csv}: no study rows found")
    written: list[Path] = []
    for hypothesis in sorted({r["hypothesis"] for r in rows}):
        sub = [r for r in rows if r["hypothesis"] == hypothesis]
        deltas = sorted({r["delta"] for r in sub})
        if deltas == [0.0]:
            written.append(_type1_figure(sub, hypothesis, out_dir))
        else:
            written.extend(_power_figures(sub, hypothesis, out_dir))
    return written


def _type1_figure(rows: list[dict], hypothesis: str, out_dir: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for test in _TEST_ORDER:
        pts = sorted((r["d"], r["rate"], r["se"]) for r in rows if r["test"] == test)
        if not pts:
            continue
        ds, rates, ses = zip(*pts)
        ax.errorbar(ds, rates, yerr=[3 * s for s in ses], marker="o",
                    capsize=3, label=_TEST_LABELS.get(test, test))
    ax.axhline(0.05, color="grey", linestyle="--", linewidth=1)
    ax.set_xscale("log")
    ax.set_xlabel("dimension d")
    ax.set_ylabel("rejection rate")
    ax.set_title(f"Null rejection rate, {hypothesis} hypothesis")
    ax.legend()
    fig.tight_layout()
    path = out_dir / f"{hypothesis}_type1.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _power_figures(rows: list[dict], hypothesis: str, out_dir: Path) -> list[Path]:
    written = []
    for d in sorted({r["d"] for r in rows}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for test in _TEST_ORDER:
            pts = sorted(
                (r["delta"], r["rate"]) for r in rows if r["test"] == test and r["d"] == d
            )
            if not pts:
                continue
            deltas, rates = zip(*pts)
            ax.plot(deltas, rates, marker="o", label=_TEST_LABELS.get(test, test))
        ax.axhline(0.05, color="grey", linestyle="--", linewidth=1)
        ax.set_xlabel("shift delta")
        ax.set_ylabel("rejection rate")
        ax.set_ylim(0.0, 1.02)
        ax.set_title(f"Power, {hypothesis} hypothesis, d={d}")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{hypothesis}_power_d{d}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written
