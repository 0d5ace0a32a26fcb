"""Seeded synthetic catalogs with images, planted duplicates and planted queries."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CatalogItem, write_catalog
from .encoders import image_key

PRODUCT_TYPES = ("Dress", "Dining Table", "Sneakers")

_VOCAB = {
    "Dress": (
        ("Women", "Girls"),
        ("floral", "striped", "polka", "solid", "paisley", "boho", "plaid"),
        ("maxi", "midi", "mini", "sleeveless", "halter", "v-neck", "ruffle"),
        ("cotton", "linen", "satin", "polyester", "lace", "knit"),
        ("Dress", "Sundress"),
    ),
    "Dining Table": (
        (None,),
        ("round", "square", "rectangular", "oval", "extendable"),
        ("wooden", "glass", "marble", "metal", "rattan", "laminate"),
        ("oak", "walnut", "pine", "matte", "glossy", "tapered"),
        ("Table", "Dining Set"),
    ),
    "Sneakers": (
        ("Men", "Women", "Boys"),
        ("low-top", "high-top", "slip-on", "lace-up", "chunky"),
        ("leather", "suede", "knit", "canvas", "mesh"),
        ("white", "black", "grey", "navy", "red", "beige"),
        ("Sneakers", "Shoes"),
    ),
}

_COLORS = ("black", "white", "red", "blue", "green", "navy", "beige", "pink", "grey", "brown")
_FILLER = (
    "comfortable", "durable", "breathable", "perfect", "premium", "easy", "for", "everyday",
    "classic", "look", "designed", "to", "last", "contrast", "trim", "stitched", "seams",
    "panel", "detail", "edges", "accents", "clean", "lines", "modern", "silhouette",
)


@dataclass
class SyntheticCatalog:
    path: Path
    image_dir: Path
    items: list[CatalogItem]
    duplicates: dict[str, str] = field(default_factory=dict)  # planted copy -> original
    planted_queries: dict[str, str] = field(default_factory=dict)  # item id -> query text

    @property
    def originals(self) -> list[str]:
        return [item.item_id for item in self.items if item.item_id not in self.duplicates]


def blocky_image(rng: np.random.Generator, size: int = 48, cells: int = 6) -> np.ndarray:
    """Coarse random colour grid with mild pixel noise; distinct draws hash far apart."""
    grid = rng.integers(0, 256, size=(cells, cells, 3))
    reps = -(-size // cells)
    img = np.kron(grid, np.ones((reps, reps, 1)))[:size, :size]
    img = img + rng.normal(0.0, 6.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def item_text(rng: np.random.Generator, product_type: str) -> tuple[str | None, str, str]:
    """(gender_age, title, description) drawn from the product type's vocabulary."""
    genders, styles, shapes, materials, nouns = _VOCAB[product_type]
    gender = genders[int(rng.integers(len(genders)))]
    color = _COLORS[int(rng.integers(len(_COLORS)))]

    def pick(pool: tuple) -> str:
        return pool[int(rng.integers(len(pool)))]

    title = " ".join((pick(styles).capitalize(), pick(shapes), color, pick(materials), pick(nouns)))
    size = int(rng.integers(1, 40))
    filler = " ".join(rng.choice(_FILLER, size=8, replace=False).tolist())
    description = f"{pick(styles)} {pick(materials)} {pick(shapes)} {color} finish, {filler}, size {size}."
    return gender, title, description


def text_catalog(n_items: int, seed: int = 0, product_types: tuple[str, ...] = PRODUCT_TYPES) -> list[CatalogItem]:
    """Metadata-only items (image refs are placeholders)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for i in range(n_items):
        ptype = product_types[i % len(product_types)]
        gender, title, description = item_text(rng, ptype)
        out.append(CatalogItem(f"item-{i:05d}", f"images/item-{i:05d}.png", ptype, title, description, gender))
    return out


def make_catalog(
    root: str | Path,
    n_items: int,
    n_duplicates: int = 0,
    seed: int = 0,
    product_types: tuple[str, ...] = PRODUCT_TYPES,
    image_size: int = 48,
) -> SyntheticCatalog:
    """Write ``catalog.jsonl`` and PNGs under ``root``.

    ``n_duplicates`` of the ``n_items`` rows are pixel-identical copies of an
    earlier row's image under a fresh id, always placed after their original.
    Planted queries are the deterministic encoder's text key of each
    original's pixels, so a text search for it lands on that image exactly.
    """
    if not 0 <= n_duplicates < max(n_items, 1):
        raise ValueError("need 0 <= n_duplicates < n_items")
    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))

    # positions of the copies among all rows, each after at least one original
    dup_slots = set(rng.choice(np.arange(1, n_items), size=n_duplicates, replace=False).tolist())

    items: list[CatalogItem] = []
    rasters: dict[str, np.ndarray] = {}
    catalog = SyntheticCatalog(root / "catalog.jsonl", image_dir, items)
    originals: list[str] = []
    for row in range(n_items):
        item_id = f"item-{row:05d}"
        ref = f"images/{item_id}.png"
        if row in dup_slots:
            source = originals[int(rng.integers(len(originals)))]
            src_item = next(it for it in items if it.item_id == source)
            raster = rasters[source]
            ptype = src_item.product_type
            gender, title, description = src_item.gender_age, src_item.title, src_item.description
            catalog.duplicates[item_id] = source
        else:
            ptype = product_types[len(originals) % len(product_types)]
            raster = blocky_image(rng, image_size)
            gender, title, description = item_text(rng, ptype)
            originals.append(item_id)
            rasters[item_id] = raster
            catalog.planted_queries[item_id] = image_key(raster)
        Image.fromarray(raster, "RGB").save(root / ref, format="PNG", optimize=False)
        items.append(CatalogItem(item_id, ref, ptype, title, description, gender))
    write_catalog(items, catalog.path)
    return catalog
