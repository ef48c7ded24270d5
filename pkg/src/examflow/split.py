"""Scan ingestion and page filing.

Takes an unsorted pile of scanned pages, decodes each page's stamp and
files the page under its student as `<sid>/<sid>-<exercise>-<page>.png`.
Pages that cannot be decoded or validated land in quarantine with a
reason sidecar; repeated payloads land in duplicates.  Nothing is ever
overwritten and every input page ends up in exactly one of the three
buckets.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import codec, raster
from .compose import StudentRecord, ToolConfig, run_tool
from .errors import ExamflowError
from .raster import DEFAULT_ROI, FULL_PAGE_ROI, PageImage, RegionOfInterest

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class SplitError(ExamflowError):
    pass


class RasterizerMissing(SplitError):
    pass


class OutputNotWritable(SplitError):
    pass


@dataclass
class ScanPage:
    """One input page: either pixels, a path to load them from, or an error."""

    index: int
    name: str
    image: PageImage | None = None
    source_path: Path | None = None
    error: str | None = None
    dpi: float = 300.0


@dataclass(frozen=True)
class FiledPage:
    payload: str
    path: Path
    page_index: int
    orientation: int
    skew_deg: float


@dataclass(frozen=True)
class QuarantinedPage:
    page_index: int
    reason: str
    path: Path | None


@dataclass(frozen=True)
class DuplicateGroup:
    payload: str
    page_indices: tuple[int, ...]
    paths: tuple[Path, ...]


@dataclass
class SplitResult:
    filed: list[FiledPage] = field(default_factory=list)
    quarantined: list[QuarantinedPage] = field(default_factory=list)
    duplicates: list[DuplicateGroup] = field(default_factory=list)

    @property
    def duplicate_extras(self) -> int:
        return sum(len(g.paths) for g in self.duplicates)

    def counts(self) -> dict[str, int]:
        return {
            "filed": len(self.filed),
            "quarantined": len(self.quarantined),
            "duplicate_extras": self.duplicate_extras,
        }


def ingest_scan(source: str | Path, tools: ToolConfig | None = None, dpi: float = 300.0) -> list[ScanPage]:
    """Enumerate the pages of a scan source in a stable order.

    A directory is read in lexicographic filename order; a PDF is
    rasterized into a sibling directory through the configured external
    rasterizer first.  Pages are path-backed and loaded lazily by
    split_batch, but files that are not readable images at all are
    marked unreadable right away.
    """
    source = Path(source)
    if not source.exists():
        raise SplitError(f"scan source {source} does not exist")

    if source.is_file() and source.suffix.lower() == ".pdf":
        if tools is None or tools.command("rasterizer") is None:
            raise RasterizerMissing(
                "splitting a PDF scan needs a 'rasterizer' command in toolconfig.json"
            )
        page_dir = source.parent / (source.stem + "-pages")
        page_dir.mkdir(exist_ok=True)
        run_tool(tools, "rasterizer", {"input": source, "outdir": page_dir, "dpi": dpi})
        source = page_dir

    if not source.is_dir():
        raise SplitError(f"scan source {source} is neither a directory nor a PDF")

    pages = []
    paths = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    for index, path in enumerate(paths):
        page = ScanPage(index=index, name=path.name, source_path=path, dpi=dpi)
        try:
            with Image.open(path) as im:
                im.size  # header parse only
        except (UnidentifiedImageError, OSError) as exc:
            page.error = f"UnreadablePage: {exc}"
            page.source_path = None
        pages.append(page)
    return pages


def _portrait_candidates(img: PageImage) -> list[PageImage]:
    """Portrait interpretations of a page; sideways scans are tried both ways."""
    if img.width_px <= img.height_px:
        return [img]
    return [
        PageImage(np.ascontiguousarray(np.rot90(img.pixels, k=1)), img.dpi),
        PageImage(np.ascontiguousarray(np.rot90(img.pixels, k=3)), img.dpi),
    ]


def _decode_task(args) -> tuple[int, dict, bytes | None]:
    """Worker: load if needed, decode with roi then full-page retry, encode PNG.

    Pure with respect to its inputs; safe to fan out across processes.
    """
    index, pixels, source_path, dpi, roi, skew_budget, compress_level = args
    if pixels is None:
        try:
            img = raster.load_page_image(source_path, fallback_dpi=dpi)
        except (UnidentifiedImageError, OSError) as exc:
            return index, {"status": "unreadable", "reason": f"UnreadablePage: {exc}"}, None
    else:
        img = PageImage(pixels, dpi)

    chosen = None
    report = None
    candidates = _portrait_candidates(img)
    for probe_roi in (roi, FULL_PAGE_ROI):
        for candidate in candidates:
            rep = raster.locate_and_decode(candidate, probe_roi, skew_budget)
            if report is None:
                report = rep
                chosen = candidate
            if rep.ok:
                report, chosen = rep, candidate
                break
        if report.ok:
            break
        if probe_roi == roi and roi == FULL_PAGE_ROI:
            break  # no distinct retry region

    png = raster.encode_page_png(chosen, compress_level)
    if report.ok:
        outcome = {
            "status": "decoded",
            "payload": report.payload_text,
            "orientation": report.orientation,
            "skew_deg": report.skew_deg,
        }
    else:
        outcome = {
            "status": "failed",
            "reason": report.failure_reason or "DecodeFailed",
            "diagnostics": report.diagnostics,
        }
    return index, outcome, png


def _as_scan_pages(pages: Sequence) -> list[ScanPage]:
    out = []
    for i, page in enumerate(pages):
        if isinstance(page, ScanPage):
            out.append(page)
        elif isinstance(page, PageImage):
            out.append(ScanPage(index=i, name=f"page-{i}", image=page, dpi=page.dpi))
        else:
            raise TypeError(f"page {i} must be ScanPage or PageImage, got {type(page)!r}")
    return out


def split_batch(
    pages: Sequence,
    roster: Sequence[StudentRecord],
    roi: RegionOfInterest = DEFAULT_ROI,
    skew_budget: float = 3.0,
    *,
    out_dir: str | Path,
    jobs: int = 1,
    png_compress_level: int = 1,
    progress=None,
) -> SplitResult:
    """Decode every page and file it under its student.

    Per-page failures never abort the batch: undecodable pages, payloads
    whose student is not on the roster, and malformed payloads are
    quarantined; a payload seen a second time is kept under duplicates.
    Decoding fans out over `jobs` worker processes; results are applied
    in input order, so the output tree is deterministic.
    """
    scan_pages = _as_scan_pages(pages)
    known_students = {r.student_id for r in roster}
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".writable-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OutputNotWritable(f"cannot write to {out_dir}: {exc}") from exc

    tasks = []
    pre_failed: dict[int, str] = {}
    for page in scan_pages:
        if page.error is not None:
            pre_failed[page.index] = page.error
            continue
        tasks.append(
            (
                page.index,
                page.image.pixels if page.image is not None else None,
                str(page.source_path) if page.source_path is not None else None,
                page.image.dpi if page.image is not None else page.dpi,
                roi,
                skew_budget,
                png_compress_level,
            )
        )

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_decode_task, tasks, chunksize=1))
    else:
        outcomes = [_decode_task(t) for t in tasks]

    by_index: dict[int, tuple[dict, bytes | None]] = {
        idx: (outcome, png) for idx, outcome, png in outcomes
    }
    for idx, reason in pre_failed.items():
        by_index[idx] = ({"status": "unreadable", "reason": reason}, None)

    result = SplitResult()
    filed_by_payload: dict[str, int] = {}
    dup_groups: dict[str, list[tuple[int, Path]]] = {}

    def _write(path: Path, png: bytes | None):
        path.parent.mkdir(parents=True, exist_ok=True)
        if png is not None:
            path.write_bytes(png)

    for page in scan_pages:
        outcome, png = by_index[page.index]
        if progress is not None:
            progress(page.index, outcome)
        if outcome["status"] in ("unreadable", "failed"):
            reason = outcome["reason"]
            qpath = out_dir / "quarantine" / f"page-{page.index}.png" if png is not None else None
            if qpath is not None:
                _write(qpath, png)
            sidecar = out_dir / "quarantine" / f"page-{page.index}.reason.txt"
            sidecar.parent.mkdir(parents=True, exist_ok=True)
            detail = reason
            if outcome.get("diagnostics"):
                tags = ", ".join(f"{k}x{v}" for k, v in sorted(outcome["diagnostics"].items()))
                detail += f"\nscanline outcomes: {tags}"
            sidecar.write_text(detail + "\n", encoding="utf-8")
            result.quarantined.append(QuarantinedPage(page.index, reason, qpath))
            continue

        payload_text = outcome["payload"]
        try:
            payload = codec.parse_payload(payload_text)
        except codec.MalformedPayload as exc:
            qpath = out_dir / "quarantine" / f"page-{page.index}.png"
            _write(qpath, png)
            reason = f"MalformedPayload: {exc}"
            (out_dir / "quarantine" / f"page-{page.index}.reason.txt").write_text(
                reason + "\n", encoding="utf-8"
            )
            result.quarantined.append(QuarantinedPage(page.index, reason, qpath))
            continue
        if payload.student_id not in known_students:
            qpath = out_dir / "quarantine" / f"page-{page.index}.png"
            _write(qpath, png)
            reason = f"UnknownStudent: {payload.student_id!r} is not on the roster"
            (out_dir / "quarantine" / f"page-{page.index}.reason.txt").write_text(
                reason + "\n", encoding="utf-8"
            )
            result.quarantined.append(QuarantinedPage(page.index, reason, qpath))
            continue

        target = out_dir / payload.student_id / f"{payload_text}.png"
        if payload_text in filed_by_payload or target.exists():
            dup_path = out_dir / "duplicates" / f"{payload_text}__page-{page.index}.png"
            _write(dup_path, png)
            dup_groups.setdefault(payload_text, []).append((page.index, dup_path))
            continue
        _write(target, png)
        filed_by_payload[payload_text] = page.index
        result.filed.append(
            FiledPage(
                payload=payload_text,
                path=target,
                page_index=page.index,
                orientation=outcome["orientation"],
                skew_deg=outcome["skew_deg"],
            )
        )

    for payload_text, extras in sorted(dup_groups.items()):
        indices = []
        if payload_text in filed_by_payload:
            indices.append(filed_by_payload[payload_text])
        indices.extend(i for i, _ in extras)
        result.duplicates.append(
            DuplicateGroup(
                payload=payload_text,
                page_indices=tuple(indices),
                paths=tuple(p for _, p in extras),
            )
        )

    _write_report(out_dir, result)
    return result


def _write_report(out_dir: Path, result: SplitResult) -> None:
    report = {
        "counts": result.counts(),
        "filed": [
            {
                "payload": f.payload,
                "path": str(f.path.relative_to(out_dir)),
                "page_index": f.page_index,
                "orientation": f.orientation,
                "skew_deg": f.skew_deg,
            }
            for f in result.filed
        ],
        "quarantined": [
            {
                "page_index": q.page_index,
                "reason": q.reason,
                "path": str(q.path.relative_to(out_dir)) if q.path else None,
            }
            for q in result.quarantined
        ],
        "duplicates": [
            {
                "payload": d.payload,
                "page_indices": list(d.page_indices),
                "paths": [str(p.relative_to(out_dir)) for p in d.paths],
            }
            for d in result.duplicates
        ],
    }
    (out_dir / "split-report.json").write_text(
        json.dumps(report, indent=2) + "\n", encoding="utf-8"
    )
