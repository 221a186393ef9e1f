"""Exception types shared across the package."""


class MaskFormatError(ValueError):
    """A mask file is missing, truncated, or not an 8-bit single-channel raster."""


class PaletteError(ValueError):
    """Class ids fall outside the palette, or the palette itself is invalid."""


class ManifestError(ValueError):
    """A dataset manifest is malformed: bad header, duplicate id, missing file."""


class ConfigError(ValueError):
    """A configuration file or value is unparseable or out of range."""
