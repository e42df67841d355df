"""Comparison-matrix heatmaps (self-contained SVG) and report tables (CSV + Markdown)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

from .judge import ComparisonMatrix, Label
from .metrics import round_half_up

DEFAULT_COLORS: dict[Label, str] = {
    Label.ABSENT: "#9e9e9e",         # grey
    Label.CONSISTENT: "#2e7d32",     # green
    Label.COMPLEMENTARY: "#fdd835",  # yellow
    Label.DIVERGENT: "#1e63c8",      # blue
    Label.CONTRADICTORY: "#000000",  # black
}

LEGEND_ORDER = (Label.ABSENT, Label.CONSISTENT, Label.COMPLEMENTARY, Label.DIVERGENT, Label.CONTRADICTORY)


@dataclass(frozen=True)
class HeatmapSpec:
    question_id: str = ""
    colors: Mapping[Label, str] = field(default_factory=lambda: dict(DEFAULT_COLORS))
    title: str | None = None
    cell: int = 14

    def __post_init__(self) -> None:
        missing = [label.value for label in Label if label not in self.colors]
        if missing:
            raise ValueError(f"color map lacks {missing}")


def render_heatmap(matrix: ComparisonMatrix, spec: HeatmapSpec | None = None) -> str:
    """Render the label grid as an SVG document with axis labels and a legend."""
    spec = spec or HeatmapSpec(question_id=matrix.question_id)
    title = spec.title if spec.title is not None else f"Question {matrix.question_id}"
    n, cell = matrix.n, spec.cell
    char_w = 6.6
    margin = 12 + int(max((len(h) for h in matrix.handbook_ids), default=0) * char_w)
    top = 28 + margin
    legend_h = 20 * len(LEGEND_ORDER) + 10
    width = max(margin + n * cell + 20, 260)
    height = top + n * cell + 20 + legend_h

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="Helvetica, Arial, sans-serif" font-size="11">',
        f'<title>{escape(title)}</title>',
        f'<text x="{margin}" y="16" font-size="13">{escape(title)}</text>',
    ]
    if n == 0:
        out.append(f'<text x="{margin}" y="{top}" class="placeholder">No handbooks answered this question.</text>')
    else:
        out.append('<g class="cells" stroke="#ffffff" stroke-width="0.5">')
        for i in range(n):
            for j in range(n):
                label = matrix.grid[i][j]
                out.append(
                    f'<rect x="{margin + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                    f'fill="{spec.colors[label]}" data-label="{label.code}"/>'
                )
        out.append("</g>")
        out.append('<g class="ylabels" text-anchor="end">')
        for i, hid in enumerate(matrix.handbook_ids):
            y = top + i * cell + cell * 0.75
            out.append(f'<text x="{margin - 4}" y="{y:g}">{escape(hid)}</text>')
        out.append("</g>")
        out.append('<g class="xlabels" text-anchor="start">')
        for j, hid in enumerate(matrix.handbook_ids):
            x = margin + j * cell + cell * 0.75
            out.append(f'<text transform="translate({x:g},{top - 4}) rotate(-90)">{escape(hid)}</text>')
        out.append("</g>")
    ly = top + n * cell + 20
    out.append('<g class="legend">')
    for k, label in enumerate(LEGEND_ORDER):
        y = ly + 20 * k
        out.append(f'<rect x="{margin}" y="{y}" width="12" height="12" fill="{spec.colors[label]}" '
                   f'stroke="#444444" stroke-width="0.5" data-legend={quoteattr(label.value)}/>')
        out.append(f'<text x="{margin + 18}" y="{y + 10}">{label.value}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- tables --------------------------------------------------------------------

@dataclass(frozen=True)
class Table:
    name: str
    headers: tuple[str, ...]
    rows: tuple[tuple, ...]
    display_rows: tuple[tuple[str, ...], ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.headers)
        for row in self.rows:
            w.writerow(["" if v is None else v for v in row])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.headers) + " |",
                 "|" + "|".join("---" for _ in self.headers) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in self.display_rows]
        return "\n".join(lines) + "\n"


def fmt_pct(x: float | None) -> str:
    return "n/a" if x is None else f"{round_half_up(100.0 * x, 1):.1f}%"


def fmt_rate(x: float | None) -> str:
    return "n/a" if x is None else f"{round_half_up(x, 3):.3f}"


def fmt_int(n: int) -> str:
    return f"{n:,}"


def _rate_csv(x: float | None) -> float | None:
    return None if x is None else round_half_up(x, 3)


def _pct_csv(x: float | None) -> float | None:
    return None if x is None else round_half_up(100.0 * x, 1)


def global_label_table(dist: Mapping) -> Table:
    headers = ("Label", "Count", "% of non-absent")
    counts = dist.get("counts", {})
    if not counts or not any(counts.values()):
        return Table("global_labels", headers, (), ())
    rows, disp = [], []
    rows.append(("Absent", counts.get("Absent", 0), None))
    disp.append(("Absent", fmt_int(counts.get("Absent", 0)), "n/a"))
    for name in ("Complementary", "Divergent", "Consistent", "Contradictory"):
        share = dist["shares"].get(name)
        rows.append((name, counts.get(name, 0), _pct_csv(share)))
        disp.append((name, fmt_int(counts.get(name, 0)), fmt_pct(share)))
    total = dist["non_absent_total"]
    rows.append(("Total non-absent", total, 100.0 if total else None))
    disp.append(("Total non-absent", fmt_int(total), "100%" if total else "n/a"))
    return Table("global_labels", headers, tuple(rows), tuple(disp))


def _display_group(gid: str) -> str:
    return gid.capitalize() if gid.islower() else gid


def absence_table(name: str, groups: Sequence[Mapping]) -> Table:
    headers = ("Group", "Questions", "Pairs", "Absence rate")
    rows = tuple((_display_group(g["group_id"]), g["q_total"], g["n_pairs"], _rate_csv(g["absence_rate"]))
                 for g in groups)
    disp = tuple((_display_group(g["group_id"]), fmt_int(g["q_total"]), fmt_int(g["n_pairs"]),
                  fmt_rate(g["absence_rate"])) for g in groups)
    return Table(name, headers, rows, disp)


def heterogeneity_table(name: str, first: str, groups: Sequence[Mapping]) -> Table:
    headers = (first, "Q_total", "Q_active", "R_div", "R_con", "%Div")
    rows = tuple((_display_group(g["group_id"]), g["q_total"], g["q_active"], _rate_csv(g["R_div"]),
                  _rate_csv(g["R_con"]), _pct_csv(g["pct_div"])) for g in groups)
    disp = tuple((_display_group(g["group_id"]), fmt_int(g["q_total"]), fmt_int(g["q_active"]),
                  fmt_rate(g["R_div"]), fmt_rate(g["R_con"]), fmt_pct(g["pct_div"])) for g in groups)
    return Table(name, headers, rows, disp)


def center_table(centers: Sequence[Mapping]) -> Table:
    headers = ("Center", "Pairs", "R_div", "R_con")
    rows = tuple((c["center_id"], c["n_pairs"], _rate_csv(c["R_div"]), _rate_csv(c["R_con"])) for c in centers)
    disp = tuple((c["center_id"], fmt_int(c["n_pairs"]), fmt_rate(c["R_div"]), fmt_rate(c["R_con"]))
                 for c in centers)
    return Table("center_metrics", headers, rows, disp)


def _by_divergence(groups: Sequence[Mapping]) -> list[Mapping]:
    return sorted(groups, key=lambda g: (g["R_div"] is None, -(g["R_div"] or 0.0), g["group_id"]))


def render_tables(metrics: Mapping) -> dict[str, Table]:
    """Build every report table from a metrics JSON document."""
    organs = metrics.get("by_organ", [])
    topics = metrics.get("by_topic", [])
    tables = [
        global_label_table(metrics.get("global_distribution", {})),
        absence_table("absence_by_organ", organs),
        absence_table("absence_by_topic", sorted(topics, key=lambda g: (g["absence_rate"] is None,
                                                                        -(g["absence_rate"] or 0.0),
                                                                        g["group_id"]))),
        heterogeneity_table("organ_metrics", "Organ", organs),
        heterogeneity_table("topic_metrics", "Topic", _by_divergence(topics)),
        center_table(metrics.get("by_center", [])),
    ]
    return {t.name: t for t in tables}
