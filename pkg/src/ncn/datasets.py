"""Synthetic detection datasets and image I/O.

Images are colored geometric shapes on a smooth gradient background;
each class has a fixed shape/color pairing so the detection task is
learnable in minutes. Everything derives from one seed: the same seed
produces byte-identical PNGs and annotations.

Layout of a generated dataset directory:

    images/img_00000.png ...
    annotations.jsonl        one record per image:
                             {"image": name, "objects": [{"class": str,
                              "bbox": [x1, y1, x2, y2]}]}
    manifest.json            file list, class names, train/val split, seed
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

import torch

SHAPE_CLASSES = ("circle", "square", "triangle", "cross", "bar", "ring")
CLASS_COLORS = (
    (222, 56, 43),
    (48, 91, 224),
    (38, 180, 76),
    (235, 183, 36),
    (158, 64, 202),
    (52, 202, 202),
)
LOSSLESS_EXTS = (".png", ".ppm")


def cache_dir():
    root = os.environ.get("NCN_CACHE_DIR")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "ncn"


@dataclass
class DatasetManifest:
    root: Path
    images: list
    annotations: dict  # image name -> list of (class_id, (x1, y1, x2, y2))
    splits: dict  # {"train": [names], "val": [names]}
    class_names: list
    seed: int
    config_hash: str = ""

    def __post_init__(self):
        overlap = set(self.splits.get("train", ())) & set(self.splits.get("val", ()))
        if overlap:
            raise ValueError(f"train/val splits overlap: {sorted(overlap)[:3]}...")
        for name in self.annotations:
            if not (self.root / "images" / name).exists():
                raise FileNotFoundError(f"annotated image missing: {name}")

    def image_path(self, name):
        return self.root / "images" / name

    def split_names(self, split):
        return list(self.splits[split])


def sample_layout(rng, size, num_classes, min_objects=1, max_objects=4):
    """Random object layout; boxes stay inside the image and never overlap."""
    n = int(rng.integers(min_objects, max_objects + 1))
    objects = []
    attempts = 0
    while len(objects) < n and attempts < 200:
        attempts += 1
        class_id = int(rng.integers(0, num_classes))
        half = int(rng.integers(8, max(9, size // 6)))
        cx = int(rng.integers(half + 1, size - half - 1))
        cy = int(rng.integers(half + 1, size - half - 1))
        # overlapping shapes would occlude each other and poison the
        # detection labels, so require disjoint boxes with a margin
        if any(
            abs(cx - ox) < half + oh + 4 and abs(cy - oy) < half + oh + 4
            for _, ox, oy, oh in objects
        ):
            continue
        objects.append((class_id, cx, cy, half))
    return objects


def _draw_shape(draw, class_id, cx, cy, half):
    color = CLASS_COLORS[class_id]
    x1, y1, x2, y2 = cx - half, cy - half, cx + half, cy + half
    name = SHAPE_CLASSES[class_id]
    if name == "circle":
        draw.ellipse([x1, y1, x2, y2], fill=color)
    elif name == "square":
        draw.rectangle([x1, y1, x2, y2], fill=color)
    elif name == "triangle":
        draw.polygon([(cx, y1), (x2, y2), (x1, y2)], fill=color)
    elif name == "cross":
        t = max(2, half // 2)
        draw.rectangle([cx - t, y1, cx + t, y2], fill=color)
        draw.rectangle([x1, cy - t, x2, cy + t], fill=color)
    elif name == "bar":
        t = max(2, half // 2)
        draw.rectangle([x1, cy - t, x2, cy + t], fill=color)
    elif name == "ring":
        draw.ellipse([x1, y1, x2, y2], fill=color)
        inner = max(2, half // 2)
        draw.ellipse([cx - inner, cy - inner, cx + inner, cy + inner], fill=(230, 230, 230))
    return (float(x1), float(y1), float(x2), float(y2))


def render_image(layout, size, rng):
    """Gradient background + shapes; returns uint8 HWC."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    base = 190 + 40 * rng.random()
    bg = np.clip(base + 30.0 * (ramp - ramp.mean()), 0, 255).astype(np.uint8)
    img = Image.fromarray(np.stack([bg, bg, bg], axis=-1))
    draw = ImageDraw.Draw(img)
    boxes = []
    for class_id, cx, cy, half in layout:
        box = _draw_shape(draw, class_id, cx, cy, half)
        boxes.append((class_id, box))
    return np.asarray(img), boxes


def generate_dataset(
    out_dir,
    n_images,
    num_classes,
    seed,
    size=128,
    val_fraction=0.2,
    min_objects=1,
    max_objects=4,
):
    """Write a seeded synthetic-shapes dataset and return its manifest."""
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPE_CLASSES)}]")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    annotations = {}
    with open(out / "annotations.jsonl", "w") as ann:
        for i in range(n_images):
            layout = sample_layout(rng, size, num_classes, min_objects, max_objects)
            pixels, boxes = render_image(layout, size, rng)
            name = f"img_{i:05d}.png"
            Image.fromarray(pixels).save(out / "images" / name)
            names.append(name)
            annotations[name] = boxes
            record = {
                "image": name,
                "objects": [
                    {"class": SHAPE_CLASSES[c], "bbox": [round(v, 1) for v in box]}
                    for c, box in boxes
                ],
            }
            ann.write(json.dumps(record, sort_keys=True) + "\n")
    n_val = max(1, int(round(n_images * val_fraction))) if n_images > 1 else 0
    splits = {"train": names[: n_images - n_val], "val": names[n_images - n_val :]}
    class_names = list(SHAPE_CLASSES[:num_classes])
    config = {
        "n_images": n_images,
        "num_classes": num_classes,
        "seed": seed,
        "size": size,
        "val_fraction": val_fraction,
    }
    config_hash = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
    manifest = {
        "images": names,
        "annotations": "annotations.jsonl",
        "splits": splits,
        "classes": class_names,
        "seed": seed,
        "config_hash": config_hash,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return load_manifest(out)


def load_manifest(root):
    root = Path(root)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    class_index = {name: i for i, name in enumerate(manifest["classes"])}
    annotations = {}
    with open(root / manifest["annotations"]) as f:
        for line in f:
            rec = json.loads(line)
            annotations[rec["image"]] = [
                (class_index[o["class"]], tuple(o["bbox"])) for o in rec["objects"]
            ]
    return DatasetManifest(
        root=root,
        images=manifest["images"],
        annotations=annotations,
        splits=manifest["splits"],
        class_names=manifest["classes"],
        seed=manifest["seed"],
        config_hash=manifest.get("config_hash", ""),
    )


def load_image(path):
    """Lossless image file -> float32 HWC in [0,1]."""
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_EXTS:
        raise ValueError(f"only lossless inputs {LOSSLESS_EXTS} are supported, got {path.name}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(path, array_or_tensor):
    """Float [0,1] HWC array or (1,3,H,W)/(3,H,W) tensor -> PNG/PPM file."""
    x = array_or_tensor
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
        if x.ndim == 4:
            x = x[0]
        if x.ndim == 3 and x.shape[0] in (1, 3):
            x = np.moveaxis(x, 0, -1)
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_EXTS:
        raise ValueError(f"refusing lossy output format {path.suffix!r}")
    img = np.clip(np.asarray(x, dtype=np.float32) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def to_tensor(hwc):
    return torch.from_numpy(np.moveaxis(np.asarray(hwc, dtype=np.float32), -1, 0)).unsqueeze(0)


def crop_with_boxes(image_hwc, boxes, crop, rng):
    """Random crop plus box adjustment; drops boxes with center outside."""
    h, w = image_hwc.shape[:2]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    patch = image_hwc[top : top + crop, left : left + crop]
    kept = []
    for class_id, (x1, y1, x2, y2) in boxes:
        cx, cy = (x1 + x2) / 2 - left, (y1 + y2) / 2 - top
        if not (0 <= cx < crop and 0 <= cy < crop):
            continue
        nx1 = min(max(x1 - left, 0.0), crop)
        ny1 = min(max(y1 - top, 0.0), crop)
        nx2 = min(max(x2 - left, 0.0), crop)
        ny2 = min(max(y2 - top, 0.0), crop)
        if nx2 - nx1 >= 2 and ny2 - ny1 >= 2:
            kept.append((class_id, (nx1, ny1, nx2, ny2)))
    return patch, kept
