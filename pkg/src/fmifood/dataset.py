"""Synthetic glyph-grid datasets and the foldered-image loader.

Each synthetic class is a bag of colored-glyph "ingredients" scattered on a
grid.  Two knobs recreate the classic failure modes: sibling classes share a
fraction of their ingredient types (inter-class similarity), and per-sample
jitter perturbs placement, color, and size (intra-class diversity).  Every
class also carries one unique marker glyph so classes stay distinguishable
even at full ingredient overlap.

The on-disk layout mirrors the usual foldered-image convention --
root/{train,test}/{class_name}/*.png plus a manifest.json -- so the same
loader reads generated and real datasets.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import ValidationError

logger = logging.getLogger(__name__)

STANDARD_TEMPLATE = "A photo of {category}, a type of food."

SHAPES = ["circle", "ring", "square", "frame", "diamond", "triangle", "cross", "plus", "stripes", "dot"]

COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.75),
    "cyan": (0.10, 0.80, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "pink": (0.95, 0.50, 0.70),
    "teal": (0.10, 0.50, 0.50),
    "olive": (0.50, 0.50, 0.10),
}

_ADJECTIVES = [
    "golden", "rustic", "smoky", "creamy", "zesty", "spicy", "frosted", "hearty",
    "savory", "tangy", "crispy", "velvet",
]
_NOUNS = [
    "stew", "tart", "roll", "bake", "salad", "pie", "bowl", "wrap",
    "curry", "chowder", "gratin", "hash",
]


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a generated dataset; regeneration is deterministic."""

    n_classes: int = 8
    ingredients_per_class: int = 4
    shared_ingredient_fraction: float = 0.0
    appearance_jitter: float = 0.5
    train_per_class: int = 200
    test_per_class: int = 40
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("need at least two classes")
        if not (0.0 <= self.shared_ingredient_fraction <= 1.0):
            raise ValidationError("shared_ingredient_fraction must lie in [0, 1]")
        if self.appearance_jitter < 0:
            raise ValidationError("appearance_jitter must be nonnegative")
        if self.ingredients_per_class < 1:
            raise ValidationError("each class needs at least one ingredient")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValidationError("need at least one sample per class per split")


@dataclass
class ClassRecipe:
    name: str
    marker: str
    ingredients: list[str]
    sibling: int

    @property
    def inventory(self) -> list[str]:
        return [self.marker] + self.ingredients


@dataclass
class SampleRecord:
    image: np.ndarray  # [H, W, 3] uint8
    caption: str
    label_id: int
    split: str


@dataclass
class DatasetHandle:
    class_names: list[str]
    records: list[SampleRecord]
    manifest: dict
    skipped: int = 0
    _split_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[SampleRecord]:
        if name not in self._split_cache:
            self._split_cache[name] = [r for r in self.records if r.split == name]
        return self._split_cache[name]

    def images_tensor(self, split: str) -> torch.Tensor:
        """All images of a split as one float32 [N, 3, H, W] tensor."""
        stack = np.stack([r.image for r in self.split(split)])
        return torch.from_numpy(stack).permute(0, 3, 1, 2).float() / 255.0

    def labels_tensor(self, split: str) -> torch.Tensor:
        return torch.tensor([r.label_id for r in self.split(split)], dtype=torch.long)


def ingredient_sentence(names: list[str]) -> str:
    """Human-readable enumeration used in captions and synthetic descriptions."""
    if len(names) == 1:
        listing = names[0]
    else:
        listing = ", ".join(names[:-1]) + " and " + names[-1]
    return f"Made with {listing}."


def synthetic_caption(class_name: str, inventory: list[str]) -> str:
    return STANDARD_TEMPLATE.format(category=class_name) + " " + ingredient_sentence(inventory)


def _glyph_pool() -> list[str]:
    return [f"{color} {shape}" for color, shape in itertools.product(sorted(COLORS), SHAPES)]


def _class_names(n: int, rng: np.random.Generator) -> list[str]:
    combos = [f"{a} {b}" for a, b in itertools.product(_ADJECTIVES, _NOUNS)]
    if n > len(combos):
        raise ValidationError(f"at most {len(combos)} classes supported")
    order = rng.permutation(len(combos))
    return [combos[i] for i in order[:n]]


def build_recipes(spec: SyntheticSpec) -> list[ClassRecipe]:
    """Assign markers and (partially shared) ingredient inventories."""
    rng = np.random.default_rng([spec.seed, 101])
    pool = _glyph_pool()
    order = list(rng.permutation(len(pool)))
    feed = iter(order)

    n_shared = math.floor(spec.shared_ingredient_fraction * spec.ingredients_per_class)
    n_solo = spec.ingredients_per_class - n_shared
    pairs = math.ceil(spec.n_classes / 2)
    needed = spec.n_classes + pairs * n_shared + spec.n_classes * n_solo
    if needed > len(pool):
        raise ValidationError(
            f"spec needs {needed} distinct glyph types but only {len(pool)} exist"
        )

    def take(k: int) -> list[str]:
        return [pool[next(feed)] for _ in range(k)]

    names = _class_names(spec.n_classes, np.random.default_rng([spec.seed, 202]))
    markers = take(spec.n_classes)
    recipes: list[ClassRecipe] = []
    for left in range(0, spec.n_classes - 1, 2):
        shared = take(n_shared)
        right = left + 1
        recipes.append(ClassRecipe(names[left], markers[left], shared + take(n_solo), sibling=right))
        recipes.append(ClassRecipe(names[right], markers[right], shared + take(n_solo), sibling=left))
    if spec.n_classes % 2 == 1:
        # Trailing class pairs backwards: it shares the previous class's
        # leading ingredients so the knob still applies to it.
        last = spec.n_classes - 1
        shared = recipes[last - 1].ingredients[:n_shared] if last else []
        recipes.append(ClassRecipe(names[last], markers[last], shared + take(n_solo), sibling=last - 1))
    return recipes


def _paint_glyph(img: np.ndarray, shape: str, color: np.ndarray, cx: float, cy: float, radius: float):
    h, w, _ = img.shape
    yy, xx = np.ogrid[:h, :w]
    dy, dx = yy - cy, xx - cx
    r = max(radius, 1.5)
    if shape == "circle":
        mask = dx**2 + dy**2 <= r**2
    elif shape == "ring":
        d2 = dx**2 + dy**2
        mask = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    elif shape == "square":
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "frame":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        mask = inside & ~((np.abs(dx) <= 0.55 * r) & (np.abs(dy) <= 0.55 * r))
    elif shape == "diamond":
        mask = np.abs(dx) + np.abs(dy) <= r
    elif shape == "triangle":
        mask = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    elif shape == "cross":
        width = max(r * 0.35, 1.0)
        mask = ((np.abs(dx - dy) <= width) | (np.abs(dx + dy) <= width)) & (dx**2 + dy**2 <= r**2)
    elif shape == "plus":
        width = max(r * 0.35, 1.0)
        mask = ((np.abs(dx) <= width) | (np.abs(dy) <= width)) & (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "stripes":
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= r) & ((yy % 4) < 2)
    elif shape == "dot":
        mask = dx**2 + dy**2 <= (0.45 * r) ** 2
    else:
        raise ValidationError(f"unknown glyph shape {shape!r}")
    img[mask] = color


def render_sample(recipe: ClassRecipe, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one sample: inventory glyphs on a jittered grid, uint8 pixels."""
    size = spec.image_size
    sigma = spec.appearance_jitter
    img = np.full((size, size, 3), 0.08, dtype=np.float64)
    img += rng.normal(0.0, 0.02 + 0.04 * sigma, img.shape)

    items = recipe.inventory
    cells_side = max(2, math.ceil(math.sqrt(len(items))))
    cell = size / cells_side
    base_radius = cell * 0.34
    placement = rng.permutation(cells_side * cells_side)[: len(items)]
    for glyph, cell_idx in zip(items, placement):
        color_name, shape = glyph.split(" ", 1)
        row, col = divmod(int(cell_idx), cells_side)
        cx = (col + 0.5) * cell + rng.normal(0.0, sigma * cell * 0.12)
        cy = (row + 0.5) * cell + rng.normal(0.0, sigma * cell * 0.12)
        cx = float(np.clip(cx, base_radius, size - base_radius))
        cy = float(np.clip(cy, base_radius, size - base_radius))
        radius = base_radius * (1.0 + sigma * rng.uniform(-0.3, 0.3))
        color = np.clip(np.array(COLORS[color_name]) + rng.normal(0.0, sigma * 0.08, 3), 0, 1)
        _paint_glyph(img, shape, color, cx, cy, radius)

    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _split_checksum(records: list[SampleRecord]) -> str:
    digest = hashlib.sha256()
    for rec in records:
        digest.update(str(rec.label_id).encode())
        digest.update(rec.caption.encode())
        digest.update(rec.image.tobytes())
    return digest.hexdigest()


def generate_synthetic(spec: SyntheticSpec) -> DatasetHandle:
    """Render the full dataset described by the spec; byte-stable under seed."""
    recipes = build_recipes(spec)
    records: list[SampleRecord] = []
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        split_code = 0 if split == "train" else 1
        for label, recipe in enumerate(recipes):
            caption = synthetic_caption(recipe.name, recipe.inventory)
            for idx in range(per_class):
                rng = np.random.default_rng([spec.seed, 303, split_code, label, idx])
                image = render_sample(recipe, spec, rng)
                records.append(SampleRecord(image, caption, label, split))

    manifest = {
        "format": "fmifood-dataset",
        "version": 1,
        "spec": asdict(spec),
        "seed": spec.seed,
        "image_size": spec.image_size,
        "classes": [
            {
                "name": r.name,
                "marker": r.marker,
                "ingredients": r.ingredients,
                "sibling": r.sibling,
            }
            for r in recipes
        ],
        "counts": {
            split: {r.name: per for r in recipes}
            for split, per in (("train", spec.train_per_class), ("test", spec.test_per_class))
        },
        "checksums": {
            split: _split_checksum([rec for rec in records if rec.split == split])
            for split in ("train", "test")
        },
    }
    return DatasetHandle([r.name for r in recipes], records, manifest)


def save_dataset(handle: DatasetHandle, root: str | Path):
    """Write PNGs in the foldered layout plus manifest.json."""
    root = Path(root)
    counters: dict[tuple[str, int], int] = {}
    for rec in handle.records:
        key = (rec.split, rec.label_id)
        idx = counters.get(key, 0)
        counters[key] = idx + 1
        class_dir = root / rec.split / handle.class_names[rec.label_id].replace(" ", "_")
        class_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rec.image).save(class_dir / f"{idx:05d}.png")
    (root / "manifest.json").write_text(json.dumps(handle.manifest, indent=2, sort_keys=True))


def load_dataset(root: str | Path) -> DatasetHandle:
    """Reload a generated dataset, rebuilding captions from the manifest."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    class_names = [c["name"] for c in manifest["classes"]]
    captions = {
        c["name"]: synthetic_caption(c["name"], [c["marker"]] + c["ingredients"])
        for c in manifest["classes"]
    }
    records: list[SampleRecord] = []
    for split in ("train", "test"):
        for label, name in enumerate(class_names):
            class_dir = root / split / name.replace(" ", "_")
            if not class_dir.is_dir():
                raise ValidationError(f"missing class directory {class_dir}")
            for png in sorted(class_dir.glob("*.png")):
                image = np.asarray(Image.open(png).convert("RGB"))
                records.append(SampleRecord(image, captions[name], label, split))
    return DatasetHandle(class_names, records, manifest)


def load_folder_dataset(
    root: str | Path,
    image_size: int = 64,
    split_ratio: float | None = None,
    seed: int = 0,
) -> DatasetHandle:
    """Load root/{train,test}/{class}/* images, or split an unsplit root.

    Label ids follow sorted class-name order (or the order pinned by an
    optional labels.json).  Unsplit roots need split_ratio; the per-class
    split is deterministic under seed.
    """
    root = Path(root)
    if (root / "manifest.json").exists():
        return load_dataset(root)

    preset = (root / "train").is_dir() and (root / "test").is_dir()
    if not preset and split_ratio is None:
        raise ValidationError(
            f"{root} has no train/test directories; pass split_ratio to split it"
        )

    def class_dirs(base: Path) -> list[Path]:
        return sorted(p for p in base.iterdir() if p.is_dir())

    labels_file = root / "labels.json"
    if labels_file.exists():
        try:
            pinned = json.loads(labels_file.read_text())["classes"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValidationError(f"malformed labels.json: {exc}") from exc
    else:
        pinned = None

    skipped = 0

    def read_images(class_dir: Path) -> list[np.ndarray]:
        nonlocal skipped
        images = []
        files = sorted(
            p for p in class_dir.iterdir()
            if p.suffix.lower() in (".png", ".bmp", ".jpg", ".jpeg")
        )
        if not files:
            raise ValidationError(f"class directory {class_dir} holds no images")
        for path in files:
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    images.append(np.asarray(im))
            except OSError as exc:
                logger.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
        return images

    base = root / "train" if preset else root
    names = [p.name.replace("_", " ") for p in class_dirs(base)]
    if pinned is not None:
        missing = set(names) - set(pinned)
        if missing:
            raise ValidationError(f"labels.json does not cover classes: {sorted(missing)}")
        names = [n for n in pinned if n in set(names)]

    records: list[SampleRecord] = []
    for label, name in enumerate(names):
        dir_name = name.replace(" ", "_")
        caption = STANDARD_TEMPLATE.format(category=name)
        if preset:
            for split in ("train", "test"):
                for image in read_images(root / split / dir_name):
                    records.append(SampleRecord(image, caption, label, split))
        else:
            images = read_images(root / dir_name)
            order = np.random.default_rng([seed, label]).permutation(len(images))
            n_train = int(round(split_ratio * len(images)))
            for pos, img_idx in enumerate(order):
                split = "train" if pos < n_train else "test"
                records.append(SampleRecord(images[img_idx], caption, label, split))

    manifest = {
        "format": "fmifood-dataset",
        "version": 1,
        "spec": None,
        "seed": seed,
        "image_size": image_size,
        "classes": [{"name": n} for n in names],
        "counts": {
            split: {n: sum(1 for r in records if r.split == split and r.label_id == i) for i, n in enumerate(names)}
            for split in ("train", "test")
        },
        "checksums": {
            split: _split_checksum([r for r in records if r.split == split])
            for split in ("train", "test")
        },
    }
    return DatasetHandle(names, records, manifest, skipped=skipped)


@dataclass
class Batch:
    images: torch.Tensor  # [b, 3, H, W] float32
    captions: list[str]
    label_ids: torch.Tensor  # [b] long
    epoch: int
    indices: list[int]


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Per-epoch shuffle order; stateless so resumed runs replay it."""
    return np.random.default_rng([seed, 404, epoch]).permutation(n)


def batch_iterator(
    dataset: DatasetHandle,
    batch_size: int,
    seed: int,
    drop_last: bool = True,
    split: str = "train",
    epochs: int = 1,
    start_epoch: int = 0,
):
    """Yield shuffled batches for the given number of epochs."""
    records = dataset.split(split)
    if batch_size < 2:
        raise ValidationError("contrastive training needs batch_size >= 2")
    if batch_size > len(records):
        raise ValidationError(
            f"batch_size {batch_size} exceeds the {len(records)} records in split {split!r}"
        )
    images = dataset.images_tensor(split)
    labels = dataset.labels_tensor(split)
    for epoch in range(start_epoch, start_epoch + epochs):
        order = epoch_permutation(len(records), seed, epoch)
        for start in range(0, len(records), batch_size):
            chosen = order[start : start + batch_size]
            if drop_last and len(chosen) < batch_size:
                break
            idx = torch.from_numpy(chosen.copy())
            yield Batch(
                images=images[idx],
                captions=[records[i].caption for i in chosen],
                label_ids=labels[idx],
                epoch=epoch,
                indices=[int(i) for i in chosen],
            )
