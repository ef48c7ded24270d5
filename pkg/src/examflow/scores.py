"""Score aggregation and grade distribution output.

Correctors hand in semicolon CSV files (`student_id;exercise_no;points`,
typically one file per corrector and exercise).  All files are merged
into one table keyed by roster order, totals are graded against a
configurable scheme, and the distribution is emitted as a text
histogram and an SVG bar chart.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from .compose import StudentRecord
from .errors import ExamflowError


class ScoresError(ExamflowError):
    pass


class ConflictingEntry(ScoresError):
    pass


class PointsOutOfRange(ScoresError):
    pass


class UnknownStudent(ScoresError):
    pass


class EmptyTable(ScoresError):
    pass


@dataclass(frozen=True)
class GradeScheme:
    """Descending grade thresholds plus the point maximum of each exercise."""

    thresholds: tuple[tuple[float, str], ...]  # (min total fraction, label)
    exercise_max: dict[int, float]

    def __post_init__(self):
        if not self.thresholds:
            raise ScoresError("grade scheme needs at least one threshold")
        fractions = [f for f, _ in self.thresholds]
        if any(b >= a for a, b in zip(fractions, fractions[1:])):
            raise ScoresError("grade thresholds must be strictly decreasing")
        if fractions[0] > 1.0:
            raise ScoresError("first grade threshold must be <= 1")
        if fractions[-1] != 0.0:
            raise ScoresError("last grade threshold must be 0 so every total gets a grade")
        labels = [label for _, label in self.thresholds]
        if len(set(labels)) != len(labels):
            raise ScoresError("grade labels must be unique")
        if not self.exercise_max or any(m <= 0 for m in self.exercise_max.values()):
            raise ScoresError("every exercise needs a positive point maximum")

    @property
    def total_max(self) -> float:
        return sum(self.exercise_max.values())

    def grade_for(self, fraction: float) -> str:
        for threshold, label in self.thresholds:
            if fraction >= threshold:
                return label
        return self.thresholds[-1][1]

    def labels(self) -> list[str]:
        return [label for _, label in self.thresholds]


def load_grade_scheme(path: str | Path) -> GradeScheme:
    """Read a grade scheme JSON: {"grades": [{"min_fraction", "label"}...],
    "exercise_max": {"1": 10, ...}}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        thresholds = tuple((float(g["min_fraction"]), str(g["label"])) for g in raw["grades"])
        exercise_max = {int(k): float(v) for k, v in raw["exercise_max"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ScoresError(f"{path}: malformed grade scheme: {exc}") from exc
    return GradeScheme(thresholds=thresholds, exercise_max=exercise_max)


@dataclass
class ScoreTable:
    """Per-student per-exercise points with totals and grades, roster order."""

    student_ids: list[str]
    points: dict[str, dict[int, float]]
    missing: set[tuple[str, int]]
    totals: dict[str, float]
    grades: dict[str, str]
    scheme: GradeScheme

    def fraction(self, student_id: str) -> float:
        return self.totals[student_id] / self.scheme.total_max


def _parse_score_file(path: Path) -> Iterable[tuple[str, int, float, int]]:
    with open(path, encoding="utf-8-sig") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(";")
            if len(fields) != 3:
                raise ScoresError(f"{path}:{lineno}: expected student_id;exercise_no;points")
            sid, exercise_s, points_s = (f.strip() for f in fields)
            try:
                exercise_no = int(exercise_s)
                points = float(points_s)
            except ValueError as exc:
                raise ScoresError(f"{path}:{lineno}: {exc}") from exc
            yield sid, exercise_no, points, lineno


def collect_scores(
    files: Sequence[str | Path],
    roster: Sequence[StudentRecord],
    scheme: GradeScheme,
) -> ScoreTable:
    """Merge corrector CSV files into one graded table.

    The same (student, exercise) pair reported twice with the same
    points is fine (idempotent syncs happen); different points are a
    conflict.  Pairs nobody reported count as 0 and are flagged missing.
    """
    known = [r.student_id for r in roster]
    known_set = set(known)
    entries: dict[tuple[str, int], tuple[float, str]] = {}
    for path in sorted(Path(p) for p in files):
        for sid, exercise_no, points, lineno in _parse_score_file(path):
            where = f"{path}:{lineno}"
            if sid not in known_set:
                raise UnknownStudent(f"{where}: student {sid!r} is not on the roster")
            maximum = scheme.exercise_max.get(exercise_no)
            if maximum is None:
                raise PointsOutOfRange(
                    f"{where}: exercise {exercise_no} has no configured maximum"
                )
            if not 0 <= points <= maximum:
                raise PointsOutOfRange(
                    f"{where}: {points} points outside [0, {maximum}] for exercise {exercise_no}"
                )
            key = (sid, exercise_no)
            if key in entries and entries[key][0] != points:
                raise ConflictingEntry(
                    f"{where}: ({sid}, {exercise_no}) already has {entries[key][0]} points "
                    f"from {entries[key][1]}, now {points}"
                )
            entries[key] = (points, where)

    points_by_student: dict[str, dict[int, float]] = {}
    missing: set[tuple[str, int]] = set()
    totals: dict[str, float] = {}
    grades: dict[str, str] = {}
    for sid in known:
        row = {}
        for exercise_no in sorted(scheme.exercise_max):
            entry = entries.get((sid, exercise_no))
            if entry is None:
                missing.add((sid, exercise_no))
                row[exercise_no] = 0.0
            else:
                row[exercise_no] = entry[0]
        points_by_student[sid] = row
        totals[sid] = sum(row.values())
        grades[sid] = scheme.grade_for(totals[sid] / scheme.total_max)
    return ScoreTable(
        student_ids=known,
        points=points_by_student,
        missing=missing,
        totals=totals,
        grades=grades,
        scheme=scheme,
    )


def write_scores_csv(table: ScoreTable, path: str | Path) -> None:
    """scores.csv: student_id;total;grade; plus one column per exercise."""
    exercises = sorted(table.scheme.exercise_max)
    lines = ["student_id;total;grade;" + ";".join(str(e) for e in exercises)]
    for sid in table.student_ids:
        row = table.points[sid]
        cells = [sid, _fmt_points(table.totals[sid]), table.grades[sid]]
        cells.extend(_fmt_points(row[e]) for e in exercises)
        lines.append(";".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt_points(value: float) -> str:
    return f"{value:g}"


def grade_counts(table: ScoreTable) -> dict[str, int]:
    counts = {label: 0 for label in table.scheme.labels()}
    for sid in table.student_ids:
        counts[table.grades[sid]] += 1
    return counts


def emit_distribution(
    table: ScoreTable,
    svg_path: str | Path,
    text_sink: TextIO | None = None,
    bar_width: int = 40,
) -> dict[str, int]:
    """Write the grade histogram as text and as an SVG bar chart.

    Returns the per-grade counts; their sum equals the roster size.
    """
    if not table.student_ids:
        raise EmptyTable("no students to plot")
    counts = grade_counts(table)
    peak = max(counts.values()) or 1

    if text_sink is not None:
        text_sink.write("grade distribution\n")
        for label, count in counts.items():
            bar = "#" * round(bar_width * count / peak)
            text_sink.write(f"{label:>8}  {count:4d}  {bar}\n")

    _write_svg(counts, Path(svg_path))
    return counts


def _write_svg(counts: dict[str, int], path: Path) -> None:
    width, height, pad = 640, 400, 48
    plot_w, plot_h = width - 2 * pad, height - 2 * pad
    peak = max(counts.values()) or 1
    n = len(counts)
    slot = plot_w / n

    svg = ET.Element(
        "svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height)
    )
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    title = ET.SubElement(
        svg, "text", x=str(width / 2), y="24", fill="black"
    )
    title.set("text-anchor", "middle")
    title.text = "Grade distribution"
    ET.SubElement(
        svg,
        "line",
        x1=str(pad),
        y1=str(height - pad),
        x2=str(width - pad),
        y2=str(height - pad),
        stroke="black",
    )
    for i, (label, count) in enumerate(counts.items()):
        bar_h = plot_h * count / peak
        x = pad + i * slot + slot * 0.15
        y = height - pad - bar_h
        ET.SubElement(
            svg,
            "rect",
            x=f"{x:.2f}",
            y=f"{y:.2f}",
            width=f"{slot * 0.7:.2f}",
            height=f"{bar_h:.2f}",
            fill="#4477aa",
        )
        tick = ET.SubElement(
            svg, "text", x=f"{pad + (i + 0.5) * slot:.2f}", y=str(height - pad + 20), fill="black"
        )
        tick.set("text-anchor", "middle")
        tick.text = label
        value = ET.SubElement(
            svg, "text", x=f"{pad + (i + 0.5) * slot:.2f}", y=f"{y - 6:.2f}", fill="black"
        )
        value.set("text-anchor", "middle")
        value.text = str(count)
    ET.ElementTree(svg).write(path, encoding="unicode", xml_declaration=True)
