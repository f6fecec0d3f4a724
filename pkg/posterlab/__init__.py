from .layout import assign_char_positions
from .version import __version__
