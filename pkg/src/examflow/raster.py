"""Bridge between bar patterns and pixels.

Renders symbols into grayscale page images and recovers payloads from
scanned pages: Bresenham-interpolated scanlines are cast across a
region of interest at a sweep of angles, each line is binarized with
Otsu's threshold, run lengths are decoded, and the per-line results are
settled by majority vote.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import codec
from .codec import BarPattern, Code39Params, PagePayload
from .errors import ExamflowError


class RasterError(ExamflowError):
    pass


class ResolutionTooLow(RasterError):
    pass


class OutOfBounds(RasterError):
    pass


class NoInk(RasterError):
    """A scanline contains nothing darker than the threshold."""


MM_PER_INCH = 25.4

# Scanline voting: a payload is accepted once at least QUORUM lines
# agree on it and it leads the runner-up by at least QUORUM votes, so a
# single corrupted line can never flip the winner to another payload.
VOTE_QUORUM = 3
MIN_SCANLINES = 15
SKEW_STEP_DEG = 0.5


@dataclass(frozen=True)
class PageImage:
    """Grayscale raster page, 0 = black, with its physical resolution."""

    pixels: np.ndarray
    dpi: float

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise RasterError("pixels must be a 2D uint8 array")
        if self.dpi <= 0:
            raise RasterError("dpi must be positive")

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class RegionOfInterest:
    """Page-relative rectangle, all fields fractions of the page size."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (0 <= self.x and 0 <= self.y and self.x + self.w <= 1 and self.y + self.h <= 1):
            raise RasterError(f"roi {self} exceeds the page")
        if self.w * self.h <= 0:
            raise RasterError("roi must have positive area")

    def mirrored(self) -> "RegionOfInterest":
        """The same region after a 180 degree page rotation."""
        return RegionOfInterest(1 - self.x - self.w, 1 - self.y - self.h, self.w, self.h)

    def pixel_box(self, width_px: int, height_px: int) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1) half-open pixel bounds, clamped to at least 1 px."""
        x0 = int(self.x * width_px)
        y0 = int(self.y * height_px)
        x1 = min(width_px, max(x0 + 1, int(math.ceil((self.x + self.w) * width_px))))
        y1 = min(height_px, max(y0 + 1, int(math.ceil((self.y + self.h) * height_px))))
        return x0, y0, x1, y1


# Bottom 15 percent of the page, full width: where the stamp normally sits.
DEFAULT_ROI = RegionOfInterest(0.0, 0.85, 1.0, 0.15)

FULL_PAGE_ROI = RegionOfInterest(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class DecodeReport:
    """Outcome of locating and decoding the barcode on one page."""

    payload: PagePayload | None
    payload_text: str | None
    orientation: int  # 0 or 180
    skew_deg: float
    votes: tuple[str, ...]
    failure_reason: str | None = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if (self.payload is None) == (self.failure_reason is None):
            raise RasterError("exactly one of payload and failure_reason must be set")
        if not self.votes:
            raise RasterError("votes must not be empty")

    @property
    def ok(self) -> bool:
        return self.payload is not None


def _line_arrays(x0: int, y0: int, x1: int, y1: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer Bresenham traversal in closed form.

    Walks the major axis one pixel at a time and places the minor axis
    at the nearest integer to the ideal line, ties rounding away from
    the start row/column in the direction of travel.
    """
    dx, dy = x1 - x0, y1 - y0
    adx, ady = abs(dx), abs(dy)
    sx, sy = (1 if dx >= 0 else -1), (1 if dy >= 0 else -1)
    if adx == 0 and ady == 0:
        return np.array([x0]), np.array([y0])
    if adx >= ady:
        i = np.arange(adx + 1)
        xs = x0 + sx * i
        ys = y0 + sy * ((2 * i * ady + adx) // (2 * adx))
    else:
        i = np.arange(ady + 1)
        ys = y0 + sy * i
        xs = x0 + sx * ((2 * i * adx + ady) // (2 * ady))
    return xs, ys


def bresenham_line(p0: tuple[int, int], p1: tuple[int, int]) -> list[tuple[int, int]]:
    """All pixel coordinates on the segment from p0 to p1, endpoints included."""
    xs, ys = _line_arrays(p0[0], p0[1], p1[0], p1[1])
    return list(zip(xs.tolist(), ys.tolist()))


def sample_scanline(img: PageImage, p0: tuple[int, int], p1: tuple[int, int]) -> np.ndarray:
    """Luminances along the Bresenham line from p0 to p1."""
    for x, y in (p0, p1):
        if not (0 <= x < img.width_px and 0 <= y < img.height_px):
            raise OutOfBounds(f"endpoint ({x}, {y}) outside {img.width_px}x{img.height_px} image")
    xs, ys = _line_arrays(p0[0], p0[1], p1[0], p1[1])
    return img.pixels[ys, xs]


def otsu_threshold(seq: np.ndarray) -> int:
    """Otsu's threshold over an 8-bit sequence; dark class is values <= t."""
    hist = np.bincount(seq, minlength=256).astype(np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    cum_mean = np.cumsum(hist * np.arange(256))
    mu_total = cum_mean[-1]
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(256)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = cum_mean / w0
        mu1 = (mu_total - cum_mean) / w1
        between[valid] = (w0 * w1 * (mu0 - mu1) ** 2)[valid]
    return int(np.argmax(between))


def median3(seq: np.ndarray) -> np.ndarray:
    """Width-3 median filter; suppresses isolated salt and pepper pixels."""
    if seq.size < 3:
        return seq
    a, b, c = seq[:-2], seq[1:-1], seq[2:]
    med = np.maximum(np.minimum(np.maximum(a, b), c), np.minimum(a, b))
    out = seq.copy()
    out[1:-1] = med
    return out


def binarize(seq: np.ndarray) -> list[tuple[str, float]]:
    """Threshold a luminance sequence and return trimmed bar/space runs.

    The quiet zone (leading and trailing light pixels) is dropped, so
    the result always starts and ends with a bar.
    """
    seq = np.asarray(seq, dtype=np.uint8)
    if seq.size == 0:
        raise ValueError("luminance sequence must be nonempty")
    if int(seq.min()) == int(seq.max()):
        raise NoInk("degenerate single-level sequence")
    t = otsu_threshold(seq)
    dark = seq <= t
    idx = np.flatnonzero(dark)
    if idx.size == 0:
        raise NoInk("nothing below the Otsu threshold")
    dark = dark[idx[0] : idx[-1] + 1]
    edges = np.flatnonzero(np.diff(dark)) + 1
    bounds = np.concatenate(([0], edges, [dark.size]))
    runs = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        kind = "bar" if dark[start] else "space"
        runs.append((kind, float(stop - start)))
    return runs


def render_barcode(pattern: BarPattern, params: Code39Params, dpi: float) -> PageImage:
    """Rasterize a pattern into a strip with quiet zones on both sides."""
    if dpi < 72:
        raise ResolutionTooLow(f"dpi {dpi} is below the 72 dpi floor")
    narrow_px = max(1, round(params.module_width_mm * dpi / MM_PER_INCH))
    wide_px = round(params.module_width_mm * params.wide_narrow_ratio * dpi / MM_PER_INCH)
    if wide_px <= narrow_px:
        raise ResolutionTooLow(
            f"{params.module_width_mm} mm modules are not representable at {dpi} dpi"
        )
    height_px = max(1, round(params.bar_height_mm * dpi / MM_PER_INCH))
    quiet_px = 10 * narrow_px

    widths = [wide_px if wide else narrow_px for _, wide in pattern.elements]
    total = 2 * quiet_px + sum(widths)
    pixels = np.full((height_px, total), 255, dtype=np.uint8)
    x = quiet_px
    for (kind, _), w in zip(pattern.elements, widths):
        if kind == "bar":
            pixels[:, x : x + w] = 0
        x += w
    return PageImage(pixels=pixels, dpi=float(dpi))


def _clipped_endpoints(y_center: float, slope: float, x0: int, x1: int, height: int):
    """Endpoints of the scanline y = y_center + slope * (x - cx) inside the image rows."""
    cx = (x0 + x1) / 2.0
    lo, hi = float(x0), float(x1)
    if slope != 0.0:
        # keep y within [0, height - 1]
        xa = cx + (0.0 - y_center) / slope
        xb = cx + (height - 1.0 - y_center) / slope
        lo = max(lo, min(xa, xb))
        hi = min(hi, max(xa, xb))
        if lo > hi:
            return None
    xi0, xi1 = int(math.ceil(lo)), int(math.floor(hi))
    if xi1 - xi0 < 1:
        return None
    ya = y_center + slope * (xi0 - cx)
    yb = y_center + slope * (xi1 - cx)
    ya = min(max(ya, 0.0), height - 1.0)
    yb = min(max(yb, 0.0), height - 1.0)
    return (xi0, int(round(ya))), (xi1, int(round(yb)))


def _sweep_angles(skew_budget: float) -> list[float]:
    """0 first, then alternating outward in half-degree steps."""
    angles = [0.0]
    k = 1
    while k * SKEW_STEP_DEG <= skew_budget + 1e-9:
        angles.append(k * SKEW_STEP_DEG)
        angles.append(-k * SKEW_STEP_DEG)
        k += 1
    return angles


def tally_votes(votes, quorum: int = VOTE_QUORUM):
    """Pick the winning payload text from per-line votes, or None.

    votes are (text, reversed) pairs for successful lines and None for
    failed ones.  The winner needs at least `quorum` votes and a lead of
    at least `quorum` over the runner-up: flipping any single vote can
    then never hand the win to a different text.
    """
    counts = Counter(text for vote in votes if vote is not None for text in [vote[0]])
    if not counts:
        return None
    ranked = counts.most_common(2)
    top_text, top_count = ranked[0]
    runner_count = ranked[1][1] if len(ranked) > 1 else 0
    if top_count >= quorum and top_count - runner_count >= quorum:
        return top_text
    return None


def _scan_pass(img: PageImage, box, angle_deg: float, n_lines: int):
    """Cast n_lines parallel scanlines across box at angle_deg.

    Returns (votes, tags): votes as consumed by tally_votes, tags as
    human-readable per-line outcomes.
    """
    x0, y0, x1, y1 = box
    slope = math.tan(math.radians(angle_deg))
    votes = []
    tags = []
    for i in range(n_lines):
        yc = y0 + (i + 0.5) * (y1 - y0) / n_lines
        ends = _clipped_endpoints(yc, slope, x0, x1 - 1, img.height_px)
        if ends is None:
            votes.append(None)
            tags.append("OutOfBounds")
            continue
        (xa, ya), (xb, yb) = ends
        xs, ys = _line_arrays(xa, ya, xb, yb)
        lum = median3(img.pixels[ys, xs])
        try:
            runs = binarize(lum)
            text, was_reversed = codec.code39_decode(runs, with_direction=True)
        except (NoInk, codec.DecodeError) as exc:
            votes.append(None)
            tags.append(type(exc).__name__)
            continue
        votes.append((text, was_reversed))
        tags.append(text)
    return votes, tags


def locate_and_decode(
    img: PageImage,
    roi: RegionOfInterest = DEFAULT_ROI,
    skew_budget: float = 3.0,
    *,
    min_scanlines: int = MIN_SCANLINES,
    quorum: int = VOTE_QUORUM,
) -> DecodeReport:
    """Find and decode the barcode inside roi, sweeping skew and flip.

    Angles are swept from zero outward in half-degree steps; at each
    angle both page orientations are tried (the 180 degree case reads
    the mirrored region and relies on the codec's reversed reading).
    Parallel scanlines are sampled, binarized and decoded, and the first
    (orientation, angle) pass with a qualified majority wins.  Scanlines
    are spaced about one millimetre apart, with at least min_scanlines
    per pass.
    """
    if not 0 <= skew_budget <= 10:
        raise RasterError(f"skew_budget must be within [0, 10] degrees, got {skew_budget}")

    boxes = []
    for orientation_roi in (roi, roi.mirrored()):
        box = orientation_roi.pixel_box(img.width_px, img.height_px)
        if box not in boxes:
            boxes.append(box)

    roi_h_px = boxes[0][3] - boxes[0][1]
    n_lines = max(min_scanlines, round(roi_h_px * MM_PER_INCH / img.dpi))

    first_tags: tuple[str, ...] | None = None
    diagnostics: Counter = Counter()
    for angle in _sweep_angles(skew_budget):
        for box in boxes:
            votes, tags = _scan_pass(img, box, angle, n_lines)
            if first_tags is None:
                first_tags = tuple(tags)
            diagnostics.update(tags)
            winner = tally_votes(votes, quorum)
            if winner is None:
                continue
            winning = [vote for vote in votes if vote is not None and vote[0] == winner]
            orientation = 180 if winning[0][1] else 0
            try:
                payload = codec.parse_payload(winner)
            except codec.MalformedPayload:
                return DecodeReport(
                    payload=None,
                    payload_text=winner,
                    orientation=orientation,
                    skew_deg=angle,
                    votes=tuple(tags),
                    failure_reason="MalformedPayload",
                    diagnostics=dict(diagnostics),
                )
            return DecodeReport(
                payload=payload,
                payload_text=winner,
                orientation=orientation,
                skew_deg=angle,
                votes=tuple(tags),
                diagnostics=dict(diagnostics),
            )

    return DecodeReport(
        payload=None,
        payload_text=None,
        orientation=0,
        skew_deg=0.0,
        votes=first_tags or ("OutOfBounds",),
        failure_reason="DecodeFailed",
        diagnostics=dict(diagnostics),
    )


def load_page_image(path: str | Path, fallback_dpi: float = 300.0) -> PageImage:
    """Read a PNG or JPEG page as luminance (Rec. 601 weights for color)."""
    with Image.open(path) as im:
        dpi = float(im.info.get("dpi", (fallback_dpi, fallback_dpi))[0]) or fallback_dpi
        gray = im.convert("L")
        pixels = np.asarray(gray, dtype=np.uint8)
    return PageImage(pixels=pixels, dpi=dpi)


def _stored_png(pixels: np.ndarray, dpi: float) -> bytes:
    """Grayscale PNG with stored (level 0) deflate, built directly.

    Equivalent to a compress_level=0 save but without the per-row filter
    machinery, an order of magnitude faster on large noisy pages.
    """
    import struct
    import zlib

    h, w = pixels.shape

    def chunk(kind: bytes, body: bytes) -> bytes:
        return (
            struct.pack(">I", len(body))
            + kind
            + body
            + struct.pack(">I", zlib.crc32(kind + body) & 0xFFFFFFFF)
        )

    raw = np.empty((h, w + 1), dtype=np.uint8)
    raw[:, 0] = 0  # filter type none on every row
    raw[:, 1:] = pixels
    ppm = round(dpi / 0.0254)
    return b"".join(
        [
            b"\x89PNG\r\n\x1a\n",
            chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)),
            chunk(b"pHYs", struct.pack(">IIB", ppm, ppm, 1)),
            chunk(b"IDAT", zlib.compress(raw.tobytes(), 0)),
            chunk(b"IEND", b""),
        ]
    )


def encode_page_png(img: PageImage, compress_level: int = 1) -> bytes:
    """Encode a page as lossless PNG bytes, preserving its resolution."""
    if compress_level == 0:
        return _stored_png(img.pixels, img.dpi)
    import io

    buf = io.BytesIO()
    pil = Image.fromarray(img.pixels, mode="L")
    pil.save(buf, format="PNG", compress_level=compress_level, dpi=(img.dpi, img.dpi))
    return buf.getvalue()


def write_page_png(img: PageImage, path: str | Path, compress_level: int = 1) -> None:
    """Write a page losslessly, preserving its resolution metadata."""
    Path(path).write_bytes(encode_page_png(img, compress_level))
