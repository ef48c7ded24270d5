"""Minimal deterministic PDF 1.4 writer for raster pages.

Each page is one image XObject drawn over the full MediaBox.  Raw
rasters are embedded as FlateDecode DeviceGray streams, pre-encoded
JPEG data is passed through untouched with a DCTDecode filter.  Object
numbering is fixed and no timestamps are written, so identical inputs
always produce identical bytes.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

from .errors import ExamflowError
from .raster import PageImage

POINTS_PER_INCH = 72.0
MAX_PAGE_POINTS = 14400.0  # format limit on either dimension


class PdfError(ExamflowError):
    pass


class EmptyDocument(PdfError):
    pass


class OversizePage(PdfError):
    pass


def _fmt(value: float) -> str:
    """Format a number the PDF way: no exponent, no trailing zeros."""
    text = f"{value:.4f}".rstrip("0").rstrip(".")
    return text if text else "0"


@dataclass(frozen=True)
class PdfPageSource:
    """One page worth of encoded image data with its physical size."""

    width_px: int
    height_px: int
    data: bytes
    filter_name: str  # "FlateDecode" or "DCTDecode"
    colorspace: str  # "DeviceGray" or "DeviceRGB"
    width_pt: float
    height_pt: float

    def __post_init__(self):
        if self.width_pt <= 0 or self.height_pt <= 0:
            raise PdfError("page must have positive point size")
        if self.width_pt > MAX_PAGE_POINTS or self.height_pt > MAX_PAGE_POINTS:
            raise OversizePage(
                f"page of {self.width_pt:.0f}x{self.height_pt:.0f} pt exceeds the {MAX_PAGE_POINTS:.0f} pt limit"
            )

    @classmethod
    def from_page_image(cls, img: PageImage, compress_level: int = 6) -> "PdfPageSource":
        """Wrap a raster page, compressing it losslessly."""
        scale = POINTS_PER_INCH / img.dpi
        return cls(
            width_px=img.width_px,
            height_px=img.height_px,
            data=zlib.compress(img.pixels.tobytes(), compress_level),
            filter_name="FlateDecode",
            colorspace="DeviceGray",
            width_pt=img.width_px * scale,
            height_pt=img.height_px * scale,
        )

    @classmethod
    def from_jpeg(cls, jpeg: bytes, dpi: float = 72.0) -> "PdfPageSource":
        """Wrap already-encoded JPEG bytes without recompressing."""
        import io

        from PIL import Image

        with Image.open(io.BytesIO(jpeg)) as im:
            if im.format != "JPEG":
                raise PdfError(f"expected JPEG data, got {im.format}")
            width, height = im.size
            mode = im.mode
        if mode == "L":
            colorspace = "DeviceGray"
        elif mode == "RGB":
            colorspace = "DeviceRGB"
        else:
            raise PdfError(f"unsupported JPEG mode {mode!r}")
        scale = POINTS_PER_INCH / dpi
        return cls(
            width_px=width,
            height_px=height,
            data=jpeg,
            filter_name="DCTDecode",
            colorspace=colorspace,
            width_pt=width * scale,
            height_pt=height * scale,
        )


class _ObjectWriter:
    """Tracks byte offsets of numbered objects as they are emitted."""

    def __init__(self, sink: BinaryIO):
        self.sink = sink
        self.offset = 0
        self.offsets: dict[int, int] = {}

    def write(self, data: bytes):
        self.sink.write(data)
        self.offset += len(data)

    def obj(self, num: int, body: bytes):
        self.offsets[num] = self.offset
        self.write(b"%d 0 obj\n" % num + body + b"\nendobj\n")


def _escape_string(text: str) -> bytes:
    out = text.encode("latin-1", "replace")
    return out.replace(b"\\", b"\\\\").replace(b"(", b"\\(").replace(b")", b"\\)")


def write_pdf(
    pages: Sequence[PdfPageSource],
    outline: Sequence[tuple[str, int]] | None = None,
    sink: BinaryIO | None = None,
) -> int:
    """Emit a PDF 1.4 document, returning the number of bytes written.

    outline is an optional list of (label, page index) bookmarks; page
    indices are zero-based and must be in range.
    """
    if not pages:
        raise EmptyDocument("cannot write a PDF with no pages")
    outline = list(outline or [])
    for label, idx in outline:
        if not 0 <= idx < len(pages):
            raise PdfError(f"outline entry {label!r} points at page {idx}, out of range")

    # fixed numbering: 1 catalog, 2 page tree, 3..2+k outline root and
    # items, then (page, image, contents) triples in page order
    n_outline = (1 + len(outline)) if outline else 0
    first_page_obj = 3 + n_outline
    page_obj = lambda i: first_page_obj + 3 * i
    image_obj = lambda i: first_page_obj + 3 * i + 1
    contents_obj = lambda i: first_page_obj + 3 * i + 2
    total_objects = first_page_obj + 3 * len(pages) - 1

    w = _ObjectWriter(sink)
    w.write(b"%PDF-1.4\n%\xe2\xe3\xcf\xd3\n")

    catalog = b"<< /Type /Catalog /Pages 2 0 R"
    if outline:
        catalog += b" /Outlines 3 0 R"
    catalog += b" >>"
    w.obj(1, catalog)

    kids = b" ".join(b"%d 0 R" % page_obj(i) for i in range(len(pages)))
    w.obj(2, b"<< /Type /Pages /Count %d /Kids [%s] >>" % (len(pages), kids))

    if outline:
        w.obj(
            3,
            b"<< /Type /Outlines /Count %d /First 4 0 R /Last %d 0 R >>"
            % (len(outline), 3 + len(outline)),
        )
        for j, (label, idx) in enumerate(outline):
            num = 4 + j
            parts = [
                b"<< /Title (%s)" % _escape_string(label),
                b"/Parent 3 0 R",
                b"/Dest [%d 0 R /Fit]" % page_obj(idx),
            ]
            if j > 0:
                parts.append(b"/Prev %d 0 R" % (num - 1))
            if j < len(outline) - 1:
                parts.append(b"/Next %d 0 R" % (num + 1))
            parts.append(b">>")
            w.obj(num, b" ".join(parts))

    for i, page in enumerate(pages):
        box = f"[0 0 {_fmt(page.width_pt)} {_fmt(page.height_pt)}]".encode("ascii")
        w.obj(
            page_obj(i),
            b"<< /Type /Page /Parent 2 0 R /MediaBox %s "
            b"/Resources << /XObject << /Im0 %d 0 R >> >> /Contents %d 0 R >>"
            % (box, image_obj(i), contents_obj(i)),
        )
        w.offsets[image_obj(i)] = w.offset
        w.write(
            b"%d 0 obj\n<< /Type /XObject /Subtype /Image /Width %d /Height %d "
            b"/ColorSpace /%s /BitsPerComponent 8 /Filter /%s /Length %d >>\nstream\n"
            % (
                image_obj(i),
                page.width_px,
                page.height_px,
                page.colorspace.encode("ascii"),
                page.filter_name.encode("ascii"),
                len(page.data),
            )
        )
        w.write(page.data)
        w.write(b"\nendstream\nendobj\n")

        content = (
            f"q {_fmt(page.width_pt)} 0 0 {_fmt(page.height_pt)} 0 0 cm /Im0 Do Q".encode("ascii")
        )
        w.obj(
            contents_obj(i),
            b"<< /Length %d >>\nstream\n%s\nendstream" % (len(content), content),
        )

    xref_at = w.offset
    w.write(b"xref\n0 %d\n" % (total_objects + 1))
    w.write(b"0000000000 65535 f \n")
    for num in range(1, total_objects + 1):
        w.write(b"%010d 00000 n \n" % w.offsets[num])
    w.write(
        b"trailer\n<< /Size %d /Root 1 0 R >>\nstartxref\n%d\n%%%%EOF\n"
        % (total_objects + 1, xref_at)
    )
    return w.offset


def write_pdf_file(
    path: str | Path,
    pages: Sequence[PdfPageSource],
    outline: Sequence[tuple[str, int]] | None = None,
) -> int:
    """write_pdf to a file, atomically (temp file in place, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            count = write_pdf(pages, outline, fh)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return count
