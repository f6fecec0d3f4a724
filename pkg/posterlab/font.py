import numpy as np

# 5x7 bitmap glyphs of the lab alphabet, one string per row, "#" = ink.
# Every glyph is a single 8-connected component and no two glyphs share a bitmap.
GLYPHS_5X7 = {
    "A": [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "B": ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    "C": [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    "D": ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."],
    "E": ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    "F": ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    "G": [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
    "H": ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "I": [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "J": ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
    "K": ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
    "L": ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    "M": ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
    "N": ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"],
    "O": [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "P": ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    "Q": [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
    "R": ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
    "S": [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    "T": ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    "U": ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "V": ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    "W": ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."],
    "X": ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
    "Y": ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
    "Z": ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
    "0": [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    "1": ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "2": [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    "3": ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    "4": ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    "5": ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    "6": ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    "7": ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    "8": [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    "9": [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
}

ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"

SOURCE_WIDTH = 5
SOURCE_HEIGHT = 7
SOURCE_SPACING = 1


class BitmapFont:
    """Nearest-neighbor scalable 5x7 bitmap font.

    A glyph rendered at height ``h`` occupies ``round(5 * h / 7)`` columns and neighbouring
    glyphs are separated by ``round(h / 7)`` columns (one source pixel, scaled). Scaling is done
    per glyph so every occurrence of a glyph at a given height has the same pixel set.
    """

    def __init__(self, glyphs: dict = GLYPHS_5X7):
        self.alphabet = "".join(glyphs.keys())
        self._bitmaps = {
            ch: np.array([[c == "#" for c in row] for row in rows], dtype=bool) for ch, rows in glyphs.items()
        }
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def __contains__(self, ch: str) -> bool:
        return ch in self._bitmaps

    def index(self, ch: str) -> int:
        return self.alphabet.index(ch)

    def bitmap(self, ch: str) -> np.ndarray:
        return self._bitmaps[ch]

    @staticmethod
    def glyph_width(height: int) -> int:
        return max(1, int(round(SOURCE_WIDTH * height / SOURCE_HEIGHT)))

    @staticmethod
    def spacing(height: int) -> int:
        return max(1, int(round(SOURCE_SPACING * height / SOURCE_HEIGHT)))

    def glyph(self, ch: str, height: int) -> np.ndarray:
        """Boolean ``height x glyph_width(height)`` bitmap of ``ch`` scaled by nearest neighbor."""
        key = (ch, height)
        if key not in self._cache:
            if ch not in self._bitmaps:
                raise ValueError(f"character {ch!r} is not in the font")
            if height < 1:
                raise ValueError("glyph height must be positive")
            width = self.glyph_width(height)
            rows = np.arange(height) * SOURCE_HEIGHT // height
            cols = np.arange(width) * SOURCE_WIDTH // width
            self._cache[key] = self._bitmaps[ch][np.ix_(rows, cols)]
        return self._cache[key]

    def line_extent(self, n_chars: int, height: int, vertical: bool = False) -> tuple[int, int]:
        """Pixel ``(width, height)`` of a packed line of ``n_chars`` glyphs."""
        if n_chars < 1:
            return 0, 0
        gw, sp = self.glyph_width(height), self.spacing(height)
        if vertical:
            return gw, n_chars * height + (n_chars - 1) * sp
        return n_chars * gw + (n_chars - 1) * sp, height


DEFAULT_FONT = BitmapFont()
