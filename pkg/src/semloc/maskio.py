"""Semantic masks, class palettes, and the dataset manifest format.

A mask is an 8-bit single-channel raster whose pixel value is a class index
into an ordered palette. Class id 255 is reserved and always rejected. Masks
travel with a ``palette_id`` tag so that similarity ops can refuse to compare
rasters labeled under different vocabularies.

Datasets are described by a CSV manifest with header
``kind,id,x_m,y_m,mask_path,parent_pano,yaw_deg`` where ``kind`` is one of
``pano``, ``view``, ``query``. Mask paths are relative to the manifest's
directory. Pano and query rows leave ``parent_pano``/``yaw_deg`` empty; view
rows fill both.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ManifestError, MaskFormatError, PaletteError

MAX_CLASS_ID = 254  # 255 is reserved for "no label assigned yet"
DEFAULT_PALETTE_ID = "default"
MANIFEST_FORMAT_VERSION = 1

MANIFEST_FIELDS = ("kind", "id", "x_m", "y_m", "mask_path", "parent_pano", "yaw_deg")
MANIFEST_KINDS = ("pano", "view", "query")


@dataclass(frozen=True)
class ClassPalette:
    """Ordered class vocabulary; index in ``names`` is the class id."""

    names: tuple[str, ...]
    palette_id: str = DEFAULT_PALETTE_ID

    def __post_init__(self) -> None:
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise PaletteError("palette needs at least two classes")
        if len(names) > MAX_CLASS_ID + 1:
            raise PaletteError(f"palette too large: {len(names)} > {MAX_CLASS_ID + 1}")
        if len(set(names)) != len(names):
            raise PaletteError("palette names must be unique")
        if any(not n or n != n.strip() for n in names):
            raise PaletteError("palette names must be non-empty and trimmed")

    @property
    def size(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise PaletteError(f"unknown class name {name!r}") from None


@dataclass(frozen=True, eq=False)
class SemanticMask:
    """A (height, width) uint8 class-id raster tagged with its palette."""

    data: np.ndarray
    palette_id: str = DEFAULT_PALETTE_ID

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise MaskFormatError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise MaskFormatError(f"mask has empty dimension: {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise MaskFormatError(f"mask dtype must be integer, got {arr.dtype}")
            if arr.min() < 0 or arr.max() > MAX_CLASS_ID:
                raise PaletteError(
                    f"class ids outside [0, {MAX_CLASS_ID}]: "
                    f"[{arr.min()}, {arr.max()}]"
                )
            arr = arr.astype(np.uint8)
        elif int(arr.max()) > MAX_CLASS_ID:
            raise PaletteError(f"class id {int(arr.max())} is reserved")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def classes_present(self) -> np.ndarray:
        return np.unique(self.data)

    def validate_against(self, palette: ClassPalette) -> None:
        top = int(self.data.max())
        if top >= palette.size:
            raise PaletteError(
                f"mask uses class id {top} but palette "
                f"{palette.palette_id!r} has {palette.size} classes"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SemanticMask):
            return NotImplemented
        return self.palette_id == other.palette_id and np.array_equal(
            self.data, other.data
        )

    def __repr__(self) -> str:
        return (
            f"SemanticMask({self.height}x{self.width}, "
            f"palette_id={self.palette_id!r})"
        )


@dataclass(frozen=True)
class PanoramaRecord:
    """A 360-degree equirectangular mask at a known planar position (meters)."""

    id: str
    position: tuple[float, float]
    mask: SemanticMask

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _as_position(self.position))
        if self.mask.width != 2 * self.mask.height:
            raise ValueError(
                f"panorama {self.id!r}: width must be exactly 2x height, "
                f"got {self.mask.width}x{self.mask.height}"
            )


@dataclass(frozen=True)
class ViewRecord:
    """A perspective crop of a panorama; inherits the panorama's position."""

    id: str
    parent_pano: str
    yaw_deg: float
    fov_deg: float
    position: tuple[float, float]
    mask: SemanticMask

    def __post_init__(self) -> None:
        object.__setattr__(self, "yaw_deg", float(self.yaw_deg) % 360.0)
        object.__setattr__(self, "position", _as_position(self.position))
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"view {self.id!r}: fov must be in (0, 180) degrees")


@dataclass(frozen=True)
class QueryRecord:
    """A query mask captured at a known position (the pose to re-verify)."""

    id: str
    position: tuple[float, float]
    mask: SemanticMask

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _as_position(self.position))


def _as_position(pos) -> tuple[float, float]:
    x, y = pos
    return (float(x), float(y))


# ---------------------------------------------------------------------------
# Raster I/O


def load_mask(
    path: str | Path,
    palette: ClassPalette | None = None,
    palette_id: str | None = None,
) -> SemanticMask:
    """Load a mask from an 8-bit grayscale PNG or a binary PGM (P5).

    Args:
        path: file to read; format chosen by extension (.pgm vs anything PIL
            can open as mode "L").
        palette: optional palette to validate class ids against; also sets the
            mask's palette_id.
        palette_id: explicit tag when no palette object is at hand.

    Returns:
        The decoded mask.

    Raises:
        MaskFormatError: missing/empty/truncated file or wrong pixel format.
        PaletteError: class ids exceed the palette (or hit the reserved 255).
    """
    path = Path(path)
    if not path.is_file():
        raise MaskFormatError(f"mask file not found: {path}")
    if path.stat().st_size == 0:
        raise MaskFormatError(f"mask file is empty: {path}")
    if path.suffix.lower() == ".pgm":
        arr = _read_pgm(path)
    else:
        arr = _read_pil(path)
    if palette is not None and palette_id is None:
        palette_id = palette.palette_id
    mask = SemanticMask(arr, palette_id or DEFAULT_PALETTE_ID)
    if palette is not None:
        mask.validate_against(palette)
    return mask


def save_mask(mask: SemanticMask, path: str | Path) -> None:
    """Write a mask as PNG or PGM depending on the path's extension."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".pgm":
        header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
        path.write_bytes(header + mask.data.tobytes())
    else:
        Image.fromarray(mask.data, mode="L").save(path)


def _read_pil(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise MaskFormatError(
                    f"{path}: expected 8-bit single-channel image, got mode {img.mode!r}"
                )
            return np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise MaskFormatError(f"{path}: cannot decode image ({exc})") from None


def _read_pgm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":  # comment runs to end of line
                while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MaskFormatError(f"{path}: truncated PGM header")
        return blob[start:pos]

    if token() != b"P5":
        raise MaskFormatError(f"{path}: not a binary PGM (missing P5 magic)")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise MaskFormatError(f"{path}: non-numeric PGM header field") from None
    if width < 1 or height < 1:
        raise MaskFormatError(f"{path}: bad PGM dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise MaskFormatError(f"{path}: PGM maxval {maxval} not in [1, 255]")
    pos += 1  # exactly one whitespace byte after maxval
    pixels = blob[pos : pos + width * height]
    if len(pixels) < width * height:
        raise MaskFormatError(f"{path}: PGM pixel data truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()


def load_palette(path: str | Path) -> ClassPalette:
    """Read a palette file: one class name per line, line number = class id."""
    path = Path(path)
    if not path.is_file():
        raise PaletteError(f"palette file not found: {path}")
    names = tuple(
        line.strip() for line in path.read_text().splitlines() if line.strip()
    )
    return ClassPalette(names, palette_id=path.stem)


def save_palette(palette: ClassPalette, path: str | Path) -> None:
    Path(path).write_text("".join(f"{name}\n" for name in palette.names))


# ---------------------------------------------------------------------------
# Nearest-neighbor resize


def resize_nearest(mask: SemanticMask, out_w: int, out_h: int) -> SemanticMask:
    """Resize with nearest-neighbor sampling (the only resampling that cannot
    invent class ids).

    Each target pixel takes the source pixel whose center is nearest to the
    target center mapped into source coordinates; an exact tie between two
    source centers resolves to the higher-index source pixel.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"resize target must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (mask.width, mask.height):
        return SemanticMask(mask.data.copy(), mask.palette_id)
    # floor((i + 0.5) * src / out) in exact integer arithmetic; float
    # evaluation can land one ulp under an exact tie and break the rule above
    rows = (2 * np.arange(out_h) + 1) * mask.height // (2 * out_h)
    cols = (2 * np.arange(out_w) + 1) * mask.width // (2 * out_w)
    return SemanticMask(mask.data[rows[:, None], cols[None, :]], mask.palette_id)


# ---------------------------------------------------------------------------
# Dataset manifest


@dataclass
class Dataset:
    """All records from one manifest, with id lookups."""

    panoramas: list[PanoramaRecord] = field(default_factory=list)
    queries: list[QueryRecord] = field(default_factory=list)
    views: list[ViewRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._rebuild_indexes()

    def _rebuild_indexes(self) -> None:
        self.pano_by_id = {p.id: p for p in self.panoramas}
        self.query_by_id = {q.id: q for q in self.queries}
        self.view_by_id = {v.id: v for v in self.views}
        self.views_by_pano: dict[str, list[ViewRecord]] = {}
        for v in self.views:
            self.views_by_pano.setdefault(v.parent_pano, []).append(v)

    def with_views(self, views: list[ViewRecord]) -> "Dataset":
        return Dataset(self.panoramas, self.queries, list(views))

    @staticmethod
    def load(manifest_path: str | Path, palette: ClassPalette | None = None) -> "Dataset":
        """Parse a manifest CSV and load every referenced mask.

        Args:
            manifest_path: path to the manifest; mask paths resolve relative
                to its directory.
            palette: optional palette used to validate and tag every mask.

        Raises:
            ManifestError: structural problems (header, duplicate ids, missing
                files, non-numeric coordinates, bad kinds, dangling parents).
        """
        manifest_path = Path(manifest_path)
        if not manifest_path.is_file():
            raise ManifestError(f"manifest not found: {manifest_path}")
        root = manifest_path.parent
        panoramas: list[PanoramaRecord] = []
        queries: list[QueryRecord] = []
        view_rows: list[tuple[int, dict]] = []
        seen_ids: set[str] = set()

        with open(manifest_path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in MANIFEST_FIELDS if c not in header]
            if missing:
                raise ManifestError(
                    f"{manifest_path}: manifest header missing columns {missing}"
                )
            for lineno, row in enumerate(reader, start=2):
                kind = (row["kind"] or "").strip()
                rid = (row["id"] or "").strip()
                if kind not in MANIFEST_KINDS:
                    raise ManifestError(f"row {lineno}: unknown kind {kind!r}")
                if not rid:
                    raise ManifestError(f"row {lineno}: empty id")
                if rid in seen_ids:
                    raise ManifestError(f"row {lineno}: duplicate id {rid!r}")
                seen_ids.add(rid)
                if kind == "view":
                    view_rows.append((lineno, dict(row)))
                    continue
                pos = _row_position(row, lineno)
                mask = _row_mask(row, lineno, root, palette)
                try:
                    if kind == "pano":
                        panoramas.append(PanoramaRecord(rid, pos, mask))
                    else:
                        queries.append(QueryRecord(rid, pos, mask))
                except ValueError as exc:
                    raise ManifestError(f"row {lineno}: {exc}") from None

        pano_ids = {p.id: p for p in panoramas}
        views: list[ViewRecord] = []
        for lineno, row in view_rows:
            rid = row["id"].strip()
            parent = (row["parent_pano"] or "").strip()
            if parent not in pano_ids:
                raise ManifestError(
                    f"row {lineno}: view {rid!r} references unknown panorama {parent!r}"
                )
            try:
                yaw = float(row["yaw_deg"])
            except (TypeError, ValueError):
                raise ManifestError(
                    f"row {lineno}: non-numeric yaw_deg {row['yaw_deg']!r}"
                ) from None
            pos = _row_position(row, lineno)
            mask = _row_mask(row, lineno, root, palette)
            try:
                views.append(ViewRecord(rid, parent, yaw, 90.0, pos, mask))
            except ValueError as exc:
                raise ManifestError(f"row {lineno}: {exc}") from None

        return Dataset(panoramas, queries, views)


def _row_position(row: dict, lineno: int) -> tuple[float, float]:
    try:
        return (float(row["x_m"]), float(row["y_m"]))
    except (TypeError, ValueError):
        raise ManifestError(
            f"row {lineno}: non-numeric coordinate "
            f"({row.get('x_m')!r}, {row.get('y_m')!r})"
        ) from None


def _row_mask(
    row: dict, lineno: int, root: Path, palette: ClassPalette | None
) -> SemanticMask:
    rel = (row["mask_path"] or "").strip()
    if not rel:
        raise ManifestError(f"row {lineno}: empty mask_path")
    try:
        return load_mask(root / rel, palette=palette)
    except (MaskFormatError, PaletteError) as exc:
        raise ManifestError(f"row {lineno}: {exc}") from None


def load_dataset(
    manifest_path: str | Path, palette: ClassPalette | None = None
) -> tuple[list[PanoramaRecord], list[QueryRecord]]:
    """Load just the panoramas and queries from a manifest."""
    ds = Dataset.load(manifest_path, palette)
    return ds.panoramas, ds.queries


def save_dataset(
    out_dir: str | Path,
    panoramas: list[PanoramaRecord],
    queries: list[QueryRecord],
    views: list[ViewRecord] = (),
    image_format: str = "png",
) -> Path:
    """Write masks/<id>.<ext> plus manifest.csv under ``out_dir``.

    Rows are emitted pano, view, query — each group in input order — so the
    output is byte-stable for a fixed input. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    masks_dir = out_dir / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    ext = image_format.lower().lstrip(".")
    if ext not in ("png", "pgm"):
        raise ValueError(f"unsupported mask format {image_format!r}")

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for p in panoramas:
            rel = f"masks/{p.id}.{ext}"
            save_mask(p.mask, out_dir / rel)
            writer.writerow(
                ["pano", p.id, _fmt(p.position[0]), _fmt(p.position[1]), rel, "", ""]
            )
        for v in views:
            rel = f"masks/{v.id}.{ext}"
            save_mask(v.mask, out_dir / rel)
            writer.writerow(
                [
                    "view",
                    v.id,
                    _fmt(v.position[0]),
                    _fmt(v.position[1]),
                    rel,
                    v.parent_pano,
                    _fmt(v.yaw_deg),
                ]
            )
        for q in queries:
            rel = f"masks/{q.id}.{ext}"
            save_mask(q.mask, out_dir / rel)
            writer.writerow(
                ["query", q.id, _fmt(q.position[0]), _fmt(q.position[1]), rel, "", ""]
            )
    return manifest_path


def _fmt(x: float) -> str:
    return f"{x:.6f}"
