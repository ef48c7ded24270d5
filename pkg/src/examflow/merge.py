"""Regroup filed pages into correction-ready or review-ready documents.

Input is the tree produced by the split step.  Three modes are
supported: one document per student (review), one document per exercise
per student (Listing-style correction hand-out), and one aggregate
document per exercise across all students with an outline entry per
student (single-corrector hand-out).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import codec, pdfout, raster
from .compose import StudentRecord
from .errors import ExamflowError


class MergeError(ExamflowError):
    pass


SKIP_DIRS = {"quarantine", "duplicates"}


@dataclass(frozen=True)
class TreePage:
    payload: codec.PagePayload
    path: Path


@dataclass
class MergeReport:
    mode: str
    documents: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def total_pages(self) -> int:
        return sum(d["pages"] for d in self.documents)


def scan_tree(tree: str | Path) -> tuple[dict[str, list[TreePage]], list[str]]:
    """Collect filed pages per student from a split output tree.

    Returns ({student_id: pages}, warnings).  Files whose names do not
    parse as payloads are reported, not fatal.
    """
    tree = Path(tree)
    if not tree.is_dir():
        raise MergeError(f"input tree {tree} is not a directory")
    students: dict[str, list[TreePage]] = {}
    warnings: list[str] = []
    for student_dir in sorted(p for p in tree.iterdir() if p.is_dir() and p.name not in SKIP_DIRS):
        pages = []
        for path in sorted(student_dir.glob("*.png")):
            try:
                payload = codec.parse_payload(path.stem)
            except codec.MalformedPayload:
                warnings.append(f"ignoring {path}: filename is not a payload")
                continue
            if payload.student_id != student_dir.name:
                warnings.append(f"ignoring {path}: payload does not match folder {student_dir.name}")
                continue
            pages.append(TreePage(payload, path))
        if pages:
            students[student_dir.name] = pages
        else:
            warnings.append(f"EmptyStudentFolder: {student_dir.name} has no filed pages")
    return students, warnings


def _load_sources(pages: Sequence[TreePage]) -> list[pdfout.PdfPageSource]:
    return [
        pdfout.PdfPageSource.from_page_image(raster.load_page_image(p.path)) for p in pages
    ]


def _gap_warnings(label: str, page_numbers: list[int]) -> list[str]:
    out = []
    for a, b in zip(page_numbers, page_numbers[1:]):
        if b > a + 1:
            out.append(f"GapWarning: {label} jumps from page {a} to page {b}")
    return out


def _write_report(out_dir: Path, report: MergeReport) -> None:
    payload = {
        "mode": report.mode,
        "total_pages": report.total_pages,
        "documents": report.documents,
        "warnings": report.warnings,
    }
    (out_dir / "merge-report.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8"
    )


def merge_student_wise(tree: str | Path, out_dir: str | Path) -> MergeReport:
    """One `<student>.pdf` per student, pages ascending by page number."""
    students, warnings = scan_tree(tree)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = MergeReport(mode="student_wise", warnings=warnings)
    for sid, pages in students.items():
        ordered = sorted(pages, key=lambda p: p.payload.page_no)
        report.warnings.extend(
            _gap_warnings(f"student {sid}", [p.payload.page_no for p in ordered])
        )
        target = out_dir / f"{sid}.pdf"
        pdfout.write_pdf_file(target, _load_sources(ordered))
        report.documents.append(
            {
                "path": str(target.relative_to(out_dir)),
                "student_id": sid,
                "pages": len(ordered),
                "payloads": [codec.serialize_payload(p.payload) for p in ordered],
            }
        )
    _write_report(out_dir, report)
    return report


def merge_exercise_wise(tree: str | Path, out_dir: str | Path) -> MergeReport:
    """Per student, one `<student>/<exercise>.pdf` per exercise."""
    students, warnings = scan_tree(tree)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = MergeReport(mode="exercise_wise", warnings=warnings)
    for sid, pages in students.items():
        by_exercise: dict[int, list[TreePage]] = {}
        for page in pages:
            by_exercise.setdefault(page.payload.exercise_no, []).append(page)
        (out_dir / sid).mkdir(exist_ok=True)
        for exercise_no in sorted(by_exercise):
            ordered = sorted(by_exercise[exercise_no], key=lambda p: p.payload.page_no)
            report.warnings.extend(
                _gap_warnings(
                    f"student {sid} exercise {exercise_no}",
                    [p.payload.page_no for p in ordered],
                )
            )
            target = out_dir / sid / f"{exercise_no}.pdf"
            pdfout.write_pdf_file(target, _load_sources(ordered))
            report.documents.append(
                {
                    "path": str(target.relative_to(out_dir)),
                    "student_id": sid,
                    "exercise_no": exercise_no,
                    "pages": len(ordered),
                    "payloads": [codec.serialize_payload(p.payload) for p in ordered],
                }
            )
    _write_report(out_dir, report)
    return report


def merge_exercise_aggregate(
    tree: str | Path, out_dir: str | Path, roster: Sequence[StudentRecord] = ()
) -> MergeReport:
    """One `exercise-<n>.pdf` across all students, with per-student bookmarks.

    Students appear in roster order; students found in the tree but not
    on the roster are appended afterwards in name order, with a warning.
    """
    students, warnings = scan_tree(tree)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = MergeReport(mode="exercise_aggregate", warnings=warnings)

    roster_order = [r.student_id for r in roster]
    known = set(roster_order)
    extras = sorted(sid for sid in students if sid not in known)
    for sid in extras:
        report.warnings.append(f"student {sid} is not on the roster; appended after roster order")
    ordered_sids = [sid for sid in roster_order if sid in students] + extras

    exercises = sorted({p.payload.exercise_no for pages in students.values() for p in pages})
    for exercise_no in exercises:
        sources: list[pdfout.PdfPageSource] = []
        outline: list[tuple[str, int]] = []
        payloads: list[str] = []
        for sid in ordered_sids:
            block = sorted(
                (p for p in students[sid] if p.payload.exercise_no == exercise_no),
                key=lambda p: p.payload.page_no,
            )
            if not block:
                continue
            report.warnings.extend(
                _gap_warnings(
                    f"exercise {exercise_no} student {sid}",
                    [p.payload.page_no for p in block],
                )
            )
            outline.append((sid, len(sources)))
            sources.extend(_load_sources(block))
            payloads.extend(codec.serialize_payload(p.payload) for p in block)
        if not sources:
            continue
        target = out_dir / f"exercise-{exercise_no}.pdf"
        pdfout.write_pdf_file(target, sources, outline=outline)
        report.documents.append(
            {
                "path": str(target.relative_to(out_dir)),
                "exercise_no": exercise_no,
                "pages": len(sources),
                "students": [sid for sid, _ in outline],
                "payloads": payloads,
            }
        )
    _write_report(out_dir, report)
    return report


MERGE_MODES = {
    "student": merge_student_wise,
    "exercise": merge_exercise_wise,
    "aggregate": merge_exercise_aggregate,
}
