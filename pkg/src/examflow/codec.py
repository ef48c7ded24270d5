"""Code-39 symbology and the page payload grammar.

Everything here is pure and raster-free: payloads are serialized to
token strings, token strings are encoded to alternating bar/space
patterns, and run-length sequences measured off a scanline are decoded
back to text.  The decoder works on relative widths only, tolerates a
reversed (upside-down) reading, and classifies narrow/wide elements
adaptively so it does not depend on the exact print ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import ExamflowError

# Code-39 character patterns: 9 elements per character, bars at even
# positions, spaces at odd positions, exactly 3 wide elements.
# "n" = narrow, "w" = wide.
CODE39_PATTERNS = {
    "0": "nnnwwnwnn",
    "1": "wnnwnnnnw",
    "2": "nnwwnnnnw",
    "3": "wnwwnnnnn",
    "4": "nnnwwnnnw",
    "5": "wnnwwnnnn",
    "6": "nnwwwnnnn",
    "7": "nnnwnnwnw",
    "8": "wnnwnnwnn",
    "9": "nnwwnnwnn",
    "A": "wnnnnwnnw",
    "B": "nnwnnwnnw",
    "C": "wnwnnwnnn",
    "D": "nnnnwwnnw",
    "E": "wnnnwwnnn",
    "F": "nnwnwwnnn",
    "G": "nnnnnwwnw",
    "H": "wnnnnwwnn",
    "I": "nnwnnwwnn",
    "J": "nnnnwwwnn",
    "K": "wnnnnnnww",
    "L": "nnwnnnnww",
    "M": "wnwnnnnwn",
    "N": "nnnnwnnww",
    "O": "wnnnwnnwn",
    "P": "nnwnwnnwn",
    "Q": "nnnnnnwww",
    "R": "wnnnnnwwn",
    "S": "nnwnnnwwn",
    "T": "nnnnwnwwn",
    "U": "wwnnnnnnw",
    "V": "nwwnnnnnw",
    "W": "wwwnnnnnn",
    "X": "nwnnwnnnw",
    "Y": "wwnnwnnnn",
    "Z": "nwwnwnnnn",
    "-": "nwnnnnwnw",
    ".": "wwnnnnwnn",
    " ": "nwwnnnwnn",
    "*": "nwnnwnwnn",
    "$": "nwnwnwnnn",
    "/": "nwnwnnnwn",
    "+": "nwnnnwnwn",
    "%": "nnnwnwnwn",
}

_PATTERN_TO_CHAR = {v: k for k, v in CODE39_PATTERNS.items()}

START_STOP = "*"

# Encodable payload text: the full charset minus the reserved start/stop.
CODE39_CHARSET = frozenset(CODE39_PATTERNS) - {START_STOP}

# Minimum separation between the wide and narrow width-cluster means.
# Below this, noise dominates the classification and the read is refused.
MIN_WIDTH_SEPARATION = 1.4


class CodecError(ExamflowError):
    """Base class for payload and symbology errors."""


class InvalidPayload(CodecError):
    pass


class MalformedPayload(CodecError):
    pass


class UnencodableCharacter(CodecError):
    pass


class DecodeError(CodecError):
    """Base class for run-sequence decode failures."""


class NoStartStop(DecodeError):
    pass


class BadElementCount(DecodeError):
    pass


class UnknownCharacter(DecodeError):
    pass


class AmbiguousWidths(DecodeError):
    pass


@dataclass(frozen=True)
class PagePayload:
    """Identity triple carried by every barcode: who, which exercise, which page."""

    student_id: str
    exercise_no: int
    page_no: int

    def __post_init__(self):
        if not self.student_id:
            raise InvalidPayload("student_id must be nonempty")
        if "-" in self.student_id:
            raise InvalidPayload(f"student_id {self.student_id!r} contains the field separator '-'")
        bad = set(self.student_id) - CODE39_CHARSET
        if bad:
            raise InvalidPayload(f"student_id {self.student_id!r} has unencodable characters {sorted(bad)}")
        if self.exercise_no < 1:
            raise InvalidPayload(f"exercise_no must be >= 1, got {self.exercise_no}")
        if self.page_no < 1:
            raise InvalidPayload(f"page_no must be >= 1, got {self.page_no}")


@dataclass(frozen=True)
class Code39Params:
    """Physical print parameters of a symbol."""

    module_width_mm: float = 0.5
    wide_narrow_ratio: float = 2.25
    bar_height_mm: float = 5.0

    def __post_init__(self):
        if self.module_width_mm <= 0:
            raise CodecError("module_width_mm must be positive")
        if self.bar_height_mm <= 0:
            raise CodecError("bar_height_mm must be positive")
        if not 2.0 <= self.wide_narrow_ratio <= 3.0:
            raise CodecError(f"wide_narrow_ratio must be in [2.0, 3.0], got {self.wide_narrow_ratio}")


@dataclass(frozen=True)
class BarPattern:
    """A full symbol as alternating elements plus the characters they spell.

    elements: (kind, wide) pairs, kind is "bar" or "space", first and
    last are bars.  symbols includes the start/stop characters.
    """

    elements: tuple[tuple[str, bool], ...]
    symbols: str = field(compare=False)

    def widths(self, ratio: float = 2.25, scale: float = 1.0) -> list[tuple[str, float]]:
        """Map width classes to run lengths: narrow -> scale, wide -> ratio * scale."""
        return [(kind, (ratio if wide else 1.0) * scale) for kind, wide in self.elements]


def serialize_payload(payload: PagePayload) -> str:
    """Join the triple with hyphens, the barcode and filename wire format."""
    return f"{payload.student_id}-{payload.exercise_no}-{payload.page_no}"


def parse_payload(text: str) -> PagePayload:
    """Parse "<student>-<exercise>-<page>" back into a payload."""
    parts = text.split("-")
    if len(parts) != 3:
        raise MalformedPayload(f"expected 3 hyphen-separated fields, got {len(parts)} in {text!r}")
    student_id, exercise_s, page_s = parts
    if not student_id:
        raise MalformedPayload(f"empty student_id in {text!r}")
    if not exercise_s.isdigit() or not page_s.isdigit():
        raise MalformedPayload(f"exercise and page must be decimal integers in {text!r}")
    exercise_no, page_no = int(exercise_s), int(page_s)
    if exercise_no < 1 or page_no < 1:
        raise MalformedPayload(f"exercise and page must be >= 1 in {text!r}")
    try:
        return PagePayload(student_id, exercise_no, page_no)
    except InvalidPayload as exc:
        raise MalformedPayload(str(exc)) from exc


def code39_encode(text: str, params: Code39Params | None = None) -> BarPattern:
    """Encode text as a Code-39 pattern wrapped in start/stop characters.

    params is accepted for interface symmetry with rendering and only
    validated; the pattern itself is independent of physical widths.
    """
    if params is not None and not isinstance(params, Code39Params):
        raise TypeError("params must be a Code39Params")
    for ch in text:
        if ch == START_STOP:
            raise UnencodableCharacter("'*' is reserved for start/stop")
        if ch not in CODE39_CHARSET:
            raise UnencodableCharacter(f"character {ch!r} is not Code-39 encodable")

    symbols = START_STOP + text + START_STOP
    elements: list[tuple[str, bool]] = []
    for i, ch in enumerate(symbols):
        if i > 0:
            elements.append(("space", False))  # inter-character gap
        pattern = CODE39_PATTERNS[ch]
        for j, wide in enumerate(pattern):
            kind = "bar" if j % 2 == 0 else "space"
            elements.append((kind, wide == "w"))
    return BarPattern(elements=tuple(elements), symbols=symbols)


def _two_cluster_split(widths: Sequence[float]) -> tuple[float, float] | None:
    """Exact 1D two-cluster split minimizing within-cluster squared error.

    Returns (narrow_mean, wide_mean), or None when all widths are equal
    (no second cluster exists).
    """
    xs = sorted(widths)
    if xs[0] == xs[-1]:
        return None
    n = len(xs)
    prefix = [0.0]
    prefix_sq = [0.0]
    for x in xs:
        prefix.append(prefix[-1] + x)
        prefix_sq.append(prefix_sq[-1] + x * x)

    best_cut, best_cost = 1, float("inf")
    for cut in range(1, n):
        s1, q1 = prefix[cut], prefix_sq[cut]
        s2, q2 = prefix[n] - s1, prefix_sq[n] - q1
        cost = (q1 - s1 * s1 / cut) + (q2 - s2 * s2 / (n - cut))
        if cost < best_cost:
            best_cost, best_cut = cost, cut
    lo = prefix[best_cut] / best_cut
    hi = (prefix[n] - prefix[best_cut]) / (n - best_cut)
    return lo, hi


def _classify_widths(runs: Sequence[tuple[str, float]]) -> list[bool]:
    """Mark each run wide/narrow, clustering bars and spaces separately.

    Bars and spaces get independent thresholds because ink spread on a
    scan widens bars and narrows spaces by the same physical margin.  A
    kind whose widths are all identical is classified all-narrow; a kind
    whose clusters are separated by less than MIN_WIDTH_SEPARATION is
    rejected as ambiguous.
    """
    wide = [False] * len(runs)
    for kind in ("bar", "space"):
        idx = [i for i, (k, _) in enumerate(runs) if k == kind]
        if not idx:
            continue
        widths = [runs[i][1] for i in idx]
        split = _two_cluster_split(widths)
        if split is None:
            continue  # uniform widths: no wide elements of this kind
        lo, hi = split
        if lo <= 0 or hi / lo < MIN_WIDTH_SEPARATION:
            raise AmbiguousWidths(
                f"{kind} width clusters {lo:.2f}/{hi:.2f} are separated by less than {MIN_WIDTH_SEPARATION}"
            )
        cut = (lo + hi) / 2.0
        for i in idx:
            wide[i] = runs[i][1] > cut
    return wide


def _decode_classified(runs: Sequence[tuple[str, float]], wide: Sequence[bool]) -> str:
    if runs[0][0] != "bar" or runs[-1][0] != "bar":
        raise BadElementCount("run sequence must start and end with a bar")
    chars: list[str | None] = []
    for i in range(0, len(runs), 10):
        group = runs[i : i + 9]
        pattern = []
        for j, (kind, _) in enumerate(group):
            expected = "bar" if j % 2 == 0 else "space"
            if kind != expected:
                raise BadElementCount(f"element {i + j} is a {kind}, expected {expected}")
            pattern.append("w" if wide[i + j] else "n")
        chars.append(_PATTERN_TO_CHAR.get("".join(pattern)))
        if i + 9 < len(runs) and wide[i + 9]:
            raise UnknownCharacter(f"wide inter-character gap after group at {i}")
    # delimiters first: an edge group that is anything but '*' means there
    # is no start/stop to anchor on, regardless of whether it is decodable
    if chars[0] != START_STOP or chars[-1] != START_STOP:
        raise NoStartStop("symbol must begin and end with '*'")
    body = chars[1:-1]
    for i, ch in enumerate(body):
        if ch is None:
            raise UnknownCharacter(f"element group {i + 1} matches no Code-39 character")
        if ch == START_STOP:
            raise UnknownCharacter("unexpected start/stop character inside the symbol")
    return "".join(body)  # type: ignore[arg-type]


def code39_decode(runs: Sequence[tuple[str, float]], *, with_direction: bool = False):
    """Decode a run-length sequence, trying the reversed reading as well.

    runs are (kind, width) pairs with kind "bar" or "space".  Widths are
    interpreted relatively, so any positive scaling decodes identically.
    Returns the decoded text, or (text, reversed) when with_direction is
    set.  The reversed reading covers pages scanned upside down; the
    asymmetry of the start/stop character guarantees at most one of the
    two directions can succeed.
    """
    if len(runs) < 19:
        raise BadElementCount(f"need at least 19 elements, got {len(runs)}")
    if (len(runs) + 1) % 10 != 0:
        raise BadElementCount(f"element count {len(runs)} does not tile into 9+1 groups")
    for _, width in runs:
        if width <= 0:
            raise BadElementCount("run widths must be positive")

    wide = _classify_widths(runs)
    try:
        text = _decode_classified(runs, wide)
        return (text, False) if with_direction else text
    except DecodeError as forward_error:
        try:
            text = _decode_classified(list(reversed(runs)), list(reversed(wide)))
        except DecodeError:
            raise forward_error from None
        return (text, True) if with_direction else text
