"""CSV dumps, plain-text tables and graymap heatmaps."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import KIN_TYPES, TRI_TYPES


def _fmt(v) -> str:
    if isinstance(v, float):
        return "-" if math.isnan(v) else f"{v:.3f}"
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def format_table(title: str, header: Sequence[str], rows, notes: Sequence[str] = ()) -> str:
    cells = [list(map(str, header))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    line = "+".join("-" * (w + 2) for w in widths)
    out = [title, line]
    for n, r in enumerate(cells):
        out.append("|".join(f" {c:>{w}} " for c, w in zip(r, widths)))
        if n == 0:
            out.append(line.replace("-", "="))
    out.append(line)
    out.extend(notes)
    return "\n".join(out) + "\n"


def write_scores(path, scored) -> Path:
    rows = [(s.pair.img_a, s.pair.img_b, s.pair.kin_type, "kin" if s.pair.label else "non-kin", s.score)
            for s in scored]
    return write_csv(path, ["img_a", "img_b", "kin_type", "label", "score"], rows)


def verification_rows(name: str, report) -> tuple[list, list]:
    types = [t for t in KIN_TYPES if t in report.accuracy]
    header = ["Method"] + types + ["AVG."]
    row = [name] + [report.accuracy[t] for t in types] + [report.average]
    return header, [row]


def write_verification(out_dir, name: str, report, stem: str = "verification") -> str:
    header, rows = verification_rows(name, report)
    write_csv(Path(out_dir) / f"{stem}.csv", header + ["threshold", "overall"],
              [r + [report.threshold, report.overall] for r in rows])
    notes = [f"threshold = {report.threshold:.6f} ({report.note})"]
    if report.flagged:
        notes.append(f"excluded from AVG. (single label class): {', '.join(report.flagged)}")
    text = format_table("Kinship verification accuracy", header, rows, notes)
    (Path(out_dir) / f"{stem}.txt").write_text(text, encoding="utf-8")
    return text


def write_trisubject(out_dir, name: str, report) -> str:
    types = [t for t in TRI_TYPES if t in report.accuracy]
    header = ["Method"] + types + ["AVG."]
    rows = [[name] + [report.accuracy[t] for t in types] + [report.average]]
    write_csv(Path(out_dir) / "trisubject.csv", header + ["threshold"], [rows[0] + [report.threshold]])
    text = format_table("Tri-subject verification accuracy", header, rows,
                        [f"threshold = {report.threshold:.6f} ({report.note})"])
    (Path(out_dir) / "trisubject.txt").write_text(text, encoding="utf-8")
    return text


def write_retrieval(out_dir, name: str, result) -> str:
    ks = sorted(result.rank_at_k)
    header = ["Method"] + [f"Rank@{k}" for k in ks] + ["AVG."]
    rows = [[name] + [result.rank_at_k[k] for k in ks] + [result.avg]]
    write_csv(Path(out_dir) / "retrieval.csv", header, rows)
    write_csv(Path(out_dir) / "retrieval_rankings.csv", ["probe", "rank", "gallery"],
              [(p, i + 1, g) for p, ranked in result.rankings.items() for i, g in enumerate(ranked)])
    notes = [f"AVG. = mean average precision over {len(result.average_precision)} probes"]
    if result.excluded:
        notes.append(f"excluded probes (family absent from gallery): {len(result.excluded)}")
    text = format_table("Search and retrieval", header, rows, notes)
    (Path(out_dir) / "retrieval.txt").write_text(text, encoding="utf-8")
    return text


def write_kfold(out_dir, report) -> str:
    types = report.types
    header = ["Fold"] + types + ["AVG."]
    rows = [[f] + [r.get(t, float("nan")) for t in types] + [report.fold_average(f)]
            for f, r in sorted(report.per_fold.items())]
    mean = report.mean()
    rows.append(["mean"] + [mean[t] for t in types] + [report.average])
    write_csv(Path(out_dir) / "kfold.csv", header, rows)
    text = format_table(f"{len(report.per_fold)}-fold verification accuracy", header, rows)
    (Path(out_dir) / "kfold.txt").write_text(text, encoding="utf-8")
    return text


def write_quality_bins(out_dir, report) -> str:
    header = ["Face-Pair Quality Score", "pairs", "accuracy"]
    rows = [[f"{lo:g}-{hi:g}", n, acc] for (lo, hi), n, acc in zip(report.bins, report.counts, report.accuracy)]
    write_csv(Path(out_dir) / "quality_bins.csv", ["lo", "hi", "pairs", "accuracy"],
              [[lo, hi, n, acc] for (lo, hi), n, acc in zip(report.bins, report.counts, report.accuracy)])
    text = format_table("Accuracy by face-pair quality", header, rows,
                        [f"threshold = {report.threshold:.6f}"])
    (Path(out_dir) / "quality_bins.txt").write_text(text, encoding="utf-8")
    return text


def write_pgm(path, values: np.ndarray) -> Path:
    """Plain (P2) graymap, row-major, scaled so the maximum maps to 255."""
    values = np.asarray(values, dtype=float)
    top = values.max()
    levels = np.zeros_like(values, dtype=int) if top <= 0 else np.rint(255 * np.clip(values, 0, None) / top).astype(int)
    h, w = levels.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in levels]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)
