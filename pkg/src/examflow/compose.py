"""Personalized exam batch generation from a roster and a macro template.

The roster is a semicolon-separated CSV whose schema comes from a
student_data.json config.  Templates carry ##FieldName## macros that are
substituted per student.  Native mode renders minimal pages (header
text, blank answer area, human-readable name line and the barcode
stamp) without any external toolchain; external mode writes substituted
sources and shells out to a configured typesetter instead.
"""

from __future__ import annotations

import json
import re
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from . import codec, pdfout
from .codec import CODE39_CHARSET, Code39Params, PagePayload
from .errors import ExamflowError
from .raster import MM_PER_INCH, PageImage, RegionOfInterest, render_barcode

A4_MM = (210.0, 297.0)

MACRO_RE = re.compile(r"##([A-Za-z0-9_]+)##")


class ComposeError(ExamflowError):
    pass


class FieldCountMismatch(ComposeError):
    pass


class DuplicateKey(ComposeError):
    pass


class InvalidKey(ComposeError):
    pass


class UnknownMacro(ComposeError):
    pass


class InvalidTemplate(ComposeError):
    pass


class ToolNotFound(ComposeError):
    pass


class ToolFailed(ComposeError):
    pass


@dataclass(frozen=True)
class RosterConfig:
    """Where the roster lives and how to interpret its columns."""

    file_path: Path
    fieldnames: tuple[str, ...]
    key: str

    def __post_init__(self):
        if not self.fieldnames:
            raise ComposeError("fieldnames must not be empty")
        if len(set(self.fieldnames)) != len(self.fieldnames):
            raise ComposeError("fieldnames must be duplicate-free")
        if self.key not in self.fieldnames:
            raise ComposeError(f"key {self.key!r} is not one of the fieldnames")


@dataclass(frozen=True)
class StudentRecord:
    """One roster row; student_id is the value of the configured key column."""

    values: dict[str, str]
    key_field: str

    @property
    def student_id(self) -> str:
        return self.values[self.key_field]

    @property
    def fieldnames(self) -> tuple[str, ...]:
        return tuple(self.values)


def load_student_data_config(path: str | Path) -> RosterConfig:
    """Read a student_data.json file ({"student_data": {...}})."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        section = raw["student_data"]
        file_path = Path(section["file_path"])
        fieldnames = tuple(section["fieldnames"])
        key = section["key"]
    except (KeyError, TypeError) as exc:
        raise ComposeError(f"{path}: malformed student_data config: {exc}") from exc
    if not file_path.is_absolute():
        file_path = path.parent / file_path
    return RosterConfig(file_path=file_path, fieldnames=fieldnames, key=key)


def load_roster(cfg: RosterConfig) -> list[StudentRecord]:
    """Parse the roster CSV: one record per nonempty line, fields split on ';'.

    There is no quoting layer, so values must not contain semicolons.
    The key column must be unique, hyphen-free and Code-39 encodable.
    """
    records: list[StudentRecord] = []
    seen: dict[str, int] = {}
    try:
        text = cfg.file_path.read_text(encoding="utf-8-sig")
    except UnicodeDecodeError as exc:
        raise ComposeError(f"{cfg.file_path} is not UTF-8: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            fields = line.split(";")
            if len(fields) != len(cfg.fieldnames):
                raise FieldCountMismatch(
                    f"{cfg.file_path}:{lineno}: expected {len(cfg.fieldnames)} fields, got {len(fields)}"
                )
            values = dict(zip(cfg.fieldnames, fields))
            key = values[cfg.key]
            if not key or "-" in key or set(key) - CODE39_CHARSET:
                raise InvalidKey(
                    f"{cfg.file_path}:{lineno}: key {key!r} must be nonempty, hyphen-free and Code-39 encodable"
                )
            if key in seen:
                raise DuplicateKey(
                    f"{cfg.file_path}:{lineno}: key {key!r} already used on line {seen[key]}"
                )
            seen[key] = lineno
            records.append(StudentRecord(values=values, key_field=cfg.key))
    return records


def substitute_macros(template_text: str, record: StudentRecord) -> str:
    """Replace every ##FieldName## with the record's value, in a single pass.

    Substituted values are never re-scanned, so a value containing a
    macro-shaped string stays literal.  Matching is exact and
    case-sensitive.
    """

    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in record.values:
            raise UnknownMacro(f"macro ##{name}## names no roster field")
        return record.values[name]

    return MACRO_RE.sub(repl, template_text)


@dataclass(frozen=True)
class ExamTemplate:
    """Exam source with macros, the page-to-exercise map and the stamp region."""

    source_text: str
    exercise_page_map: tuple[int, ...]
    barcode_roi: RegionOfInterest
    page_size_mm: tuple[float, float] = A4_MM

    def __post_init__(self):
        if not self.exercise_page_map:
            raise InvalidTemplate("exercise_page_map must not be empty")
        if any(e < 1 for e in self.exercise_page_map):
            raise InvalidTemplate("exercise numbers must be >= 1")

    @property
    def page_count(self) -> int:
        return len(self.exercise_page_map)

    def validate_macros(self, fieldnames: Iterable[str]) -> None:
        known = set(fieldnames)
        for name in MACRO_RE.findall(self.source_text):
            if name not in known:
                raise InvalidTemplate(f"template macro ##{name}## names no roster field")


def load_template(path: str | Path) -> ExamTemplate:
    """Read an exam template JSON file."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        roi_raw = raw.get("barcode_roi")
        roi = (
            RegionOfInterest(roi_raw["x"], roi_raw["y"], roi_raw["w"], roi_raw["h"])
            if roi_raw
            else RegionOfInterest(0.0, 0.85, 1.0, 0.15)
        )
        return ExamTemplate(
            source_text=raw["source_text"],
            exercise_page_map=tuple(int(e) for e in raw["exercise_page_map"]),
            barcode_roi=roi,
            page_size_mm=tuple(raw.get("page_size_mm", A4_MM)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidTemplate(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class ToolConfig:
    """External command templates from toolconfig.json, keyed by role."""

    tools: dict[str, tuple[str, ...]]

    def command(self, name: str) -> tuple[str, ...] | None:
        return self.tools.get(name)


def load_toolconfig(path: str | Path) -> ToolConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    tools = {}
    for name, entry in raw.get("tools", {}).items():
        argv = entry["command"] if isinstance(entry, dict) else entry
        tools[name] = tuple(str(a) for a in argv)
    return ToolConfig(tools=tools)


def _expand_command(argv: Sequence[str], mapping: dict) -> list[str]:
    out: list[str] = []
    for token in argv:
        if token == "{inputs}":
            out.extend(str(p) for p in mapping.get("inputs", []))
            continue
        try:
            out.append(token.format_map(mapping))
        except KeyError as exc:
            raise ToolFailed(f"unknown placeholder {exc} in command token {token!r}") from exc
    return out


def run_tool(tools: ToolConfig | None, name: str, mapping: dict, timeout: float = 600.0) -> None:
    """Run a configured external command with placeholder substitution."""
    argv = tools.command(name) if tools else None
    if not argv:
        raise ToolNotFound(f"no {name!r} command configured in toolconfig.json")
    expanded = _expand_command(argv, mapping)
    if shutil.which(expanded[0]) is None:
        raise ToolNotFound(f"{name} executable {expanded[0]!r} not found on PATH")
    proc = subprocess.run(expanded, capture_output=True, text=True, timeout=timeout)
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "").strip()[-2000:]
        raise ToolFailed(f"{name} exited with {proc.returncode}: {tail}")


# --- native page rendering -------------------------------------------------

_FONT_CACHE: dict[int, ImageFont.ImageFont] = {}


def _font(size_px: int):
    font = _FONT_CACHE.get(size_px)
    if font is None:
        try:
            font = ImageFont.load_default(size=size_px)
        except TypeError:  # older Pillow: fixed-size bitmap font only
            font = ImageFont.load_default()
        _FONT_CACHE[size_px] = font
    return font


def compose_page_text(
    template: ExamTemplate, record: StudentRecord, exercise_no: int, page_no: int
) -> dict[str, object]:
    """All strings printed on one native page, for rendering and for audits."""
    header_lines = [
        line for line in substitute_macros(template.source_text, record).splitlines() if line.strip()
    ]
    name_parts = [
        record.values[f]
        for f in record.fieldnames
        if f != record.key_field and "name" in f.lower()
    ]
    footer = ""
    if name_parts:
        footer = "Name: " + " ".join(name_parts) + "   "
    footer += f"Student-id: {record.student_id}"
    return {
        "header_lines": header_lines[:6],
        "exercise_line": f"Exercise {exercise_no}  (page {page_no} / {template.page_count})",
        "footer_line": footer,
    }


def render_exam_page(
    template: ExamTemplate,
    record: StudentRecord,
    exercise_no: int,
    page_no: int,
    params: Code39Params = Code39Params(),
    dpi: float = 300.0,
) -> tuple[PagePayload, PageImage]:
    """Render one native exam page with its barcode stamp.

    The footer text is kept well clear of the barcode rows so that
    skewed scanlines through the stamp never cross printed glyphs.
    """
    width_mm, height_mm = template.page_size_mm
    w = round(width_mm * dpi / MM_PER_INCH)
    h = round(height_mm * dpi / MM_PER_INCH)

    def mm(v: float) -> int:
        return round(v * dpi / MM_PER_INCH)

    payload = PagePayload(record.student_id, exercise_no, page_no)
    strip = render_barcode(codec.code39_encode(codec.serialize_payload(payload)), params, dpi)

    texts = compose_page_text(template, record, exercise_no, page_no)
    im = Image.new("L", (w, h), 255)
    draw = ImageDraw.Draw(im)
    margin = mm(15)
    y = margin
    for line in texts["header_lines"]:
        draw.text((margin, y), line, font=_font(mm(4)), fill=0)
        y += mm(6)
    draw.text((margin, y + mm(2)), texts["exercise_line"], font=_font(mm(3.5)), fill=0)
    draw.text((margin, y + mm(10)), "Solution:", font=_font(mm(3.5)), fill=0)

    page = np.array(im, dtype=np.uint8)

    roi = template.barcode_roi
    x0, y0, x1, y1 = roi.pixel_box(w, h)
    if strip.width_px > x1 - x0 or strip.height_px > y1 - y0:
        raise InvalidTemplate(
            f"barcode of {strip.width_px}x{strip.height_px} px does not fit the "
            f"{x1 - x0}x{y1 - y0} px stamp region; enlarge barcode_roi or shrink the payload"
        )
    sx = x0 + ((x1 - x0) - strip.width_px) // 2
    # stamp sits in the upper part of the region, footer text goes at least
    # 7 mm lower so a +-3 degree scanline cannot clip both
    sy = y0 + max(0, min((y1 - y0) // 4, (y1 - y0) - strip.height_px))
    page[sy : sy + strip.height_px, sx : sx + strip.width_px] = strip.pixels

    footer_img = Image.new("L", (w - 2 * margin, mm(6)), 255)
    ImageDraw.Draw(footer_img).text((0, 0), texts["footer_line"], font=_font(mm(3.5)), fill=0)
    footer_arr = np.array(footer_img, dtype=np.uint8)
    fy = sy + strip.height_px + mm(7)
    if fy + footer_arr.shape[0] > h - mm(2):
        fy = y0 - mm(10)  # no room below: move above the stamp region
    if fy >= mm(2):
        region = page[fy : fy + footer_arr.shape[0], margin : margin + footer_arr.shape[1]]
        np.minimum(region, footer_arr[: region.shape[0], : region.shape[1]], out=region)

    return payload, PageImage(pixels=page, dpi=float(dpi))


def iter_exam_pages(
    template: ExamTemplate,
    record: StudentRecord,
    params: Code39Params = Code39Params(),
    dpi: float = 300.0,
) -> Iterator[tuple[PagePayload, PageImage]]:
    """All pages of one student's exam, in page order."""
    for page_no, exercise_no in enumerate(template.exercise_page_map, start=1):
        yield render_exam_page(template, record, exercise_no, page_no, params, dpi)


# --- batch assembly --------------------------------------------------------


@dataclass(frozen=True)
class BatchResult:
    document_path: Path
    manifest_path: Path
    total_pages: int
    payloads: tuple[str, ...]


def _write_manifest(path: Path, template: ExamTemplate, entries: list[dict]) -> None:
    manifest = {
        "page_count": sum(e["page_count"] for e in entries),
        "pages_per_exam": template.page_count,
        "students": entries,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def generate_batch(
    template: ExamTemplate,
    roster: Sequence[StudentRecord],
    out_dir: str | Path,
    *,
    params: Code39Params = Code39Params(),
    dpi: float = 300.0,
    mode: str = "native",
    tools: ToolConfig | None = None,
    compress_level: int = 6,
) -> BatchResult:
    """Produce one batch document covering the whole roster, plus a manifest.

    Native mode renders and stamps every page itself; external mode
    writes the substituted template source per student, runs the
    configured typesetter on each, and concatenates the per-student
    results with the configured concatenator command.
    """
    if mode not in ("native", "external"):
        raise ComposeError(f"unknown mode {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if roster:
        template.validate_macros(roster[0].fieldnames)

    entries = []
    payloads: list[str] = []
    for record in roster:
        student_payloads = [
            codec.serialize_payload(PagePayload(record.student_id, exercise_no, page_no))
            for page_no, exercise_no in enumerate(template.exercise_page_map, start=1)
        ]
        payloads.extend(student_payloads)
        entries.append(
            {
                "student_id": record.student_id,
                "page_count": template.page_count,
                "payloads": student_payloads,
            }
        )
    if len(set(payloads)) != len(payloads):
        raise ComposeError("duplicate payloads in batch; roster keys must be unique")

    document_path = out_dir / "exam_batch.pdf"
    manifest_path = out_dir / "manifest.json"

    if mode == "native":
        pages = []
        for record in roster:
            for _, page in iter_exam_pages(template, record, params, dpi):
                pages.append(pdfout.PdfPageSource.from_page_image(page, compress_level))
        if pages:
            pdfout.write_pdf_file(document_path, pages)
        else:
            document_path.write_bytes(b"")
    else:
        build_dir = out_dir / "build"
        build_dir.mkdir(exist_ok=True)
        student_pdfs = []
        for record in roster:
            source_dir = build_dir / record.student_id
            source_dir.mkdir(parents=True, exist_ok=True)
            source = source_dir / "exam.tex"
            source.write_text(substitute_macros(template.source_text, record), encoding="utf-8")
            output = source_dir / "exam.pdf"
            run_tool(
                tools,
                "typesetter",
                {"source": source, "outdir": source_dir, "output": output},
            )
            if not output.exists():
                raise ToolFailed(f"typesetter produced no output for {record.student_id}")
            student_pdfs.append(output)
        if student_pdfs:
            run_tool(
                tools,
                "concatenator",
                {"inputs": student_pdfs, "output": document_path},
            )
            if not document_path.exists():
                raise ToolFailed("concatenator produced no output")
        else:
            document_path.write_bytes(b"")

    _write_manifest(manifest_path, template, entries)
    return BatchResult(
        document_path=document_path,
        manifest_path=manifest_path,
        total_pages=len(payloads),
        payloads=tuple(payloads),
    )
