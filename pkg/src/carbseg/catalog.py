"""Built-in class catalogs and prompt renames for carbseg."""

from __future__ import annotations

from carbseg.models import IGNORE_INDEX, ClassCatalog

# Class names that make poor text prompts, replaced before text embedding.
PROMPT_RENAMES: dict[str, str] = {
    "vegetation": "tree",
    "terrain": "grass",
    "person": "pedestrian",
}

# The 19 evaluated Cityscapes classes (train ids 0..18) and their official colours.
CITYSCAPES_CLASSES: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("road", (128, 64, 128)),
    ("sidewalk", (244, 35, 232)),
    ("building", (70, 70, 70)),
    ("wall", (102, 102, 156)),
    ("fence", (190, 153, 153)),
    ("pole", (153, 153, 153)),
    ("traffic light", (250, 170, 30)),
    ("traffic sign", (220, 220, 0)),
    ("vegetation", (107, 142, 35)),
    ("terrain", (152, 251, 152)),
    ("sky", (70, 130, 180)),
    ("person", (220, 20, 60)),
    ("rider", (255, 0, 0)),
    ("car", (0, 0, 142)),
    ("truck", (0, 0, 70)),
    ("bus", (0, 60, 100)),
    ("train", (0, 80, 100)),
    ("motorcycle", (0, 0, 230)),
    ("bicycle", (119, 11, 32)),
)

# The 11 conventionally evaluated CamVid classes.
CAMVID_CLASSES: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("sky", (128, 128, 128)),
    ("building", (128, 0, 0)),
    ("pole", (192, 192, 128)),
    ("road", (128, 64, 128)),
    ("sidewalk", (60, 40, 222)),
    ("tree", (128, 128, 0)),
    ("sign symbol", (192, 128, 128)),
    ("fence", (64, 64, 128)),
    ("car", (64, 0, 128)),
    ("pedestrian", (64, 64, 0)),
    ("bicyclist", (0, 128, 192)),
)

WILDDASH2_CLASS_NAMES: tuple[str, ...] = (
    "ego vehicle", "road", "sidewalk", "building", "wall", "fence",
    "guard rail", "pole", "traffic light", "traffic sign", "vegetation",
    "terrain", "sky", "person", "rider", "car", "truck", "bus",
    "motorcycle", "bicycle", "pickup", "van", "billboard", "street light",
    "road marking",
)

# Class roles used by the synthetic generator: large regions first, then small objects.
SYNTHETIC_LARGE_NAMES: tuple[str, ...] = ("road", "building", "vegetation", "sky", "sidewalk")
SYNTHETIC_SMALL_NAMES: tuple[str, ...] = ("pole", "traffic light", "traffic sign")


def default_palette(count: int) -> tuple[tuple[int, int, int], ...]:
    """Bit-interleaved palette (the usual VOC colour map) for *count* classes."""
    colours = []
    for index in range(count):
        r = g = b = 0
        cid = index + 1
        for shift in range(7, -1, -1):
            r |= ((cid >> 0) & 1) << shift
            g |= ((cid >> 1) & 1) << shift
            b |= ((cid >> 2) & 1) << shift
            cid >>= 3
        colours.append((r, g, b))
    return tuple(colours)


def prompt_name(name: str) -> str:
    """Return the text-prompt name for a class name."""
    return PROMPT_RENAMES.get(name, name)


def make_catalog(
    names: tuple[str, ...] | list[str],
    palette: tuple[tuple[int, int, int], ...] | None = None,
) -> ClassCatalog:
    """Build a catalog with prompt renames applied and a default palette."""
    names = tuple(names)
    if len(names) >= IGNORE_INDEX:
        raise ValueError(f"at most {IGNORE_INDEX - 1} classes fit beside the ignore index")
    if palette is None:
        palette = default_palette(len(names))
    return ClassCatalog(
        names=names,
        prompt_names=tuple(prompt_name(n) for n in names),
        palette=tuple(palette),
    )


def builtin_catalog(name: str) -> ClassCatalog:
    """Return a built-in catalog: ``cityscapes``, ``camvid`` or ``wilddash2``."""
    key = name.lower()
    if key == "cityscapes":
        return make_catalog(
            [n for n, _ in CITYSCAPES_CLASSES], tuple(c for _, c in CITYSCAPES_CLASSES)
        )
    if key == "camvid":
        return make_catalog(
            [n for n, _ in CAMVID_CLASSES], tuple(c for _, c in CAMVID_CLASSES)
        )
    if key == "wilddash2":
        return make_catalog(WILDDASH2_CLASS_NAMES)
    raise ValueError(f"unknown built-in catalog {name!r}")


def synthetic_catalog(class_count: int, small_classes: int) -> ClassCatalog:
    """Catalog for synthetic scenes: large-region classes then small-object classes."""
    large_count = class_count - small_classes
    names = [
        SYNTHETIC_LARGE_NAMES[i] if i < len(SYNTHETIC_LARGE_NAMES) else f"region {i}"
        for i in range(large_count)
    ]
    names += [
        SYNTHETIC_SMALL_NAMES[i] if i < len(SYNTHETIC_SMALL_NAMES) else f"object {i}"
        for i in range(small_classes)
    ]
    return make_catalog(names)
