from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable


class InvalidLineError(ValueError):
    """Raised when a text line cannot be positioned (empty content or degenerate box)."""


class Orientation(Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"

    def __str__(self) -> str:
        return self.value


class RegionLabel(Enum):
    """Cells of the 3x3 grid used for coarse spatial descriptions."""

    TOP_LEFT = "top-left"
    TOP_CENTER = "top-center"
    TOP_RIGHT = "top-right"
    MIDDLE_LEFT = "middle-left"
    MIDDLE_CENTER = "middle-center"
    MIDDLE_RIGHT = "middle-right"
    BOTTOM_LEFT = "bottom-left"
    BOTTOM_CENTER = "bottom-center"
    BOTTOM_RIGHT = "bottom-right"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def from_cell(cls, col: int, row: int) -> RegionLabel:
        return list(cls)[row * 3 + col]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized canvas coordinates.

    Construction does not validate, so that invalid layouts can be represented and reported by
    :func:`validate_layout`. Use :meth:`is_valid` or :meth:`check` before relying on the invariants.
    """

    x_l: float
    y_t: float
    x_r: float
    y_b: float

    def is_valid(self) -> bool:
        in_range = all(0.0 <= v <= 1.0 for v in (self.x_l, self.y_t, self.x_r, self.y_b))
        return in_range and self.x_l < self.x_r and self.y_t < self.y_b

    def check(self) -> None:
        if not self.is_valid():
            raise ValueError(f"invalid box {self}")

    @property
    def width(self) -> float:
        return self.x_r - self.x_l

    @property
    def height(self) -> float:
        return self.y_b - self.y_t

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_l + self.x_r) / 2, (self.y_t + self.y_b) / 2

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def intersection(self, other: BBox) -> float:
        w = min(self.x_r, other.x_r) - max(self.x_l, other.x_l)
        h = min(self.y_b, other.y_b) - max(self.y_t, other.y_t)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def iou(self, other: BBox) -> float:
        inter = self.intersection(other)
        if inter == 0.0:
            return 0.0
        return inter / (self.area + other.area - inter)

    def to_pixels(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Pixel rectangle ``(x0, y0, x1, y1)`` with exclusive right/bottom edges."""
        return (
            int(round(self.x_l * width)),
            int(round(self.y_t * height)),
            int(round(self.x_r * width)),
            int(round(self.y_b * height)),
        )

    @classmethod
    def from_pixels(cls, x0: int, y0: int, x1: int, y1: int, width: int, height: int) -> BBox:
        return cls(x0 / width, y0 / height, x1 / width, y1 / height)

    def to_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_l, self.y_t, self.x_r, self.y_b)


@dataclass(frozen=True)
class TextLine:
    content: str
    box: BBox
    orientation: Orientation = Orientation.HORIZONTAL

    def __len__(self) -> int:
        return len(self.content)


@dataclass(frozen=True)
class CharPosition:
    x: float
    y: float

    def to_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Layout:
    lines: tuple[TextLine, ...] = field(default_factory=tuple)
    canvas: tuple[int, int] = (48, 48)

    def __post_init__(self):
        # accept any sequence but store a tuple so layouts stay hashable
        object.__setattr__(self, "lines", tuple(self.lines))

    def __len__(self) -> int:
        return len(self.lines)

    @property
    def n_chars(self) -> int:
        return sum(len(line) for line in self.lines)


@dataclass(frozen=True)
class Violation:
    rule: str
    lines: tuple[int, ...]

    def __str__(self) -> str:
        where = ",".join(str(i) for i in self.lines)
        return f"{self.rule} @ line{'s' if len(self.lines) > 1 else ''} {where}"


def assign_char_positions(line: TextLine) -> list[CharPosition]:
    """Assign each character of a line the center of its equal share of the box.

    For a horizontal line of ``n`` characters the ``i``-th character (1-based) sits at
    ``x_l + (i - 0.5) / n * (x_r - x_l)`` on the box midline; vertical lines subdivide the
    box height top-to-bottom the same way.

    Parameters
    ----------
    line : TextLine
        Line with nonempty content and a valid box.

    Returns
    -------
    positions : list[CharPosition]
        One position per character, in writing order.
    """
    if not isinstance(line, TextLine):
        raise TypeError("line must be a TextLine object")
    n = len(line.content)
    if n == 0:
        raise InvalidLineError("text line has empty content")
    if not line.box.is_valid():
        raise InvalidLineError(f"text line has an invalid box {line.box}")
    box = line.box
    x_mid = (box.x_l + box.x_r) / 2
    y_mid = (box.y_t + box.y_b) / 2
    if line.orientation == Orientation.HORIZONTAL:
        return [CharPosition(box.x_l + ((i - 0.5) / n) * (box.x_r - box.x_l), y_mid) for i in range(1, n + 1)]
    return [CharPosition(x_mid, box.y_t + ((i - 0.5) / n) * (box.y_b - box.y_t)) for i in range(1, n + 1)]


def _grid_index(v: float) -> int:
    # boundary values fall into the lower cell
    if v <= 1 / 3:
        return 0
    if v <= 2 / 3:
        return 1
    return 2


def coarse_region_descriptor(box: BBox) -> RegionLabel:
    """Return the 3x3 grid cell containing the box center."""
    box.check()
    cx, cy = box.center
    return RegionLabel.from_cell(_grid_index(cx), _grid_index(cy))


def describe_span(box: BBox) -> str:
    """Coarse phrase naming the grid cells of the box's top-left and bottom-right corners."""
    box.check()
    start = RegionLabel.from_cell(_grid_index(box.x_l), _grid_index(box.y_t))
    end = RegionLabel.from_cell(_grid_index(box.x_r), _grid_index(box.y_b))
    if start == end:
        return f"at the {start}"
    return f"spans from the {start} to the {end}"


def describe_layout(layout: Layout) -> list[str]:
    return [f'"{line.content}" {describe_span(line.box)}' for line in layout.lines]


def validate_layout(layout: Layout, alphabet: Iterable[str] | None = None) -> list[Violation]:
    """Check the Layout invariants.

    Parameters
    ----------
    layout : Layout
        Layout to check.
    alphabet : iterable of str, optional
        When given, characters outside it are reported as ``unknown-character``.

    Returns
    -------
    violations : list[Violation]
        Empty iff every invariant holds.
    """
    allowed = set(alphabet) if alphabet is not None else None
    violations: list[Violation] = []
    for idx, line in enumerate(layout.lines):
        if len(line.content) == 0:
            violations.append(Violation("empty-content", (idx,)))
        elif allowed is not None and any(c not in allowed for c in line.content):
            violations.append(Violation("unknown-character", (idx,)))
        b = line.box
        if not (b.x_l < b.x_r and b.y_t < b.y_b):
            violations.append(Violation("degenerate-box", (idx,)))
        if not all(0.0 <= v <= 1.0 for v in b.to_tuple()):
            violations.append(Violation("out-of-bounds", (idx,)))
    for i in range(len(layout.lines)):
        for j in range(i + 1, len(layout.lines)):
            if layout.lines[i].box.iou(layout.lines[j].box) > 0:
                violations.append(Violation("overlap", (i, j)))
    return violations
