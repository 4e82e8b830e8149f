"""Named color palette and hex color parsing."""
from __future__ import annotations

import re
from typing import Optional

# Default named palette of the reference web engine.
PALETTE = {
    "black": "#000000",
    "white": "#ffffff",
    "grey": "#9d9d9d",
    "darkgrey": "#697175",
    "lightgrey": "#cccccc",
    "gray": "#9d9d9d",
    "darkgray": "#697175",
    "lightgray": "#cccccc",
    "red": "#be2633",
    "darkred": "#732930",
    "lightred": "#e06f8b",
    "brown": "#a46422",
    "darkbrown": "#493c2b",
    "lightbrown": "#eeb62f",
    "orange": "#eb8931",
    "yellow": "#f7e26b",
    "green": "#44891a",
    "darkgreen": "#2f484e",
    "lightgreen": "#a3ce27",
    "blue": "#1d57f7",
    "lightblue": "#b2dcef",
    "darkblue": "#1b2632",
    "purple": "#342a97",
    "pink": "#de65e2",
}

TRANSPARENT = None
_HEX = re.compile(r"^#([0-9a-fA-F]{3}|[0-9a-fA-F]{6})$")


def _hex_to_rgb(code: str) -> tuple:
    h = code[1:]
    if len(h) == 3:
        h = "".join(c * 2 for c in h)
    return (int(h[0:2], 16), int(h[2:4], 16), int(h[4:6], 16))


def resolve_color(token: str) -> Optional[tuple]:
    """Return an (r, g, b) triple, ``()`` for transparent, or None if unknown."""
    t = token.lower()
    if t == "transparent":
        return ()
    if t in PALETTE:
        return _hex_to_rgb(PALETTE[t])
    if _HEX.match(t):
        return _hex_to_rgb(t)
    return None
