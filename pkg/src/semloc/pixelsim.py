"""Pixel-wise semantic similarity between two class masks.

The score is the fraction of co-located pixels whose class ids agree:
identical masks score 1.0, fully disagreeing masks 0.0. Inputs must already
share dimensions and palette — silently resizing here would hide real
pipeline bugs, so mismatches raise instead.
"""

from __future__ import annotations

import numpy as np

from .errors import PaletteError
from .maskio import SemanticMask


def pixelwise_similarity(query: SemanticMask, database: SemanticMask) -> float:
    """Fraction of pixels with equal class id at the same location.

    Raises:
        ValueError: masks differ in height or width.
        PaletteError: masks are tagged with different palettes.
    """
    if query.shape != database.shape:
        raise ValueError(
            f"mask dimensions differ: {query.shape} vs {database.shape}"
        )
    if query.palette_id != database.palette_id:
        raise PaletteError(
            f"palette mismatch: {query.palette_id!r} vs {database.palette_id!r}"
        )
    agree = int(np.count_nonzero(query.data == database.data))
    return agree / (query.height * query.width)
