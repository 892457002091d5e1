"""Synthetic scene and region-question generation.

Scenes are dark noisy backgrounds with colored shapes (circle, square,
triangle, bar) plus a context-dependent look-alike pair: "alpha-bar" and
"beta-bar" are rendered with identical pixels, and which is which is
signalled only by corner markers. A context scene always contains one
bar of each identity (left and right half), with the left corners marked
for the left bar and the right corners for the right bar, so a cropped
view of a bar is class-ambiguous by construction while the full image
always disambiguates it.

Questions are "is there a <class> in this region?" with a binary answer
decided by the at-least-one-pixel rule. Two properties are enforced at
generation time:

* only classes actually present in a scene are asked about, and
* every (image, class) pair gets equally many "yes" and "no" questions,

so the answer is statistically independent of everything visible without
the region, and a region-blind model cannot beat chance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig
from .netpbm import write_pgm, write_ppm


class DataError(RuntimeError):
    """Scene or question construction failed (bad config or exhausted retries)."""


STANDARD_CLASSES = ("circle", "square", "triangle", "bar")
CONTEXT_CLASSES = ("alpha-bar", "beta-bar")

CLASS_COLORS = {
    "circle": (0.85, 0.25, 0.25),
    "square": (0.25, 0.80, 0.30),
    "triangle": (0.30, 0.40, 0.90),
    "bar": (0.85, 0.75, 0.25),
}
CONTEXT_BAR_COLOR = (0.88, 0.88, 0.88)
MARKER_COLORS = {"alpha-bar": (0.95, 0.10, 0.85), "beta-bar": (0.10, 0.90, 0.90)}

BACKGROUND_BASE = 0.10
PLACE_RETRIES = 200
REGION_RETRIES = 400


@dataclass
class SceneObject:
    obj_id: int
    class_name: str
    pixel_count: int


@dataclass
class Scene:
    image: np.ndarray            # (3, S, S) floats in [0, 1]
    segmap: np.ndarray           # (S, S) int object ids, 0 = background
    objects: list[SceneObject]
    is_context: bool = False
    marker_boxes: list = field(default_factory=list)   # (r0, c0, r1, c1) half-open

    def class_mask(self, class_name: str) -> np.ndarray:
        ids = [o.obj_id for o in self.objects if o.class_name == class_name]
        return np.isin(self.segmap, ids)

    def present_classes(self) -> list[str]:
        seen = []
        for o in self.objects:
            if o.class_name not in seen:
                seen.append(o.class_name)
        return seen


# -- shape rasterization --------------------------------------------------------


def _span(size: int, lo_frac: float, hi_frac: float, floor: int,
          rng: np.random.Generator) -> int:
    lo = max(floor, int(size * lo_frac))
    hi = max(lo + 1, int(size * hi_frac) + 1)
    return int(rng.integers(lo, hi))


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, int, int]:
    """Random footprint for one object, sized relative to the canvas."""
    if kind == "circle":
        r = _span(size, 0.08, 0.16, 2, rng)
        d = 2 * r + 1
        yy, xx = np.mgrid[:d, :d]
        return ((yy - r) ** 2 + (xx - r) ** 2 <= r * r), d, d
    if kind == "square":
        s = _span(size, 0.14, 0.28, 3, rng)
        return np.ones((s, s), dtype=bool), s, s
    if kind == "triangle":
        s = _span(size, 0.17, 0.31, 4, rng)
        patch = np.zeros((s, s), dtype=bool)
        for row in range(s):
            half = int(round((row / max(s - 1, 1)) * (s - 1) / 2))
            mid = (s - 1) // 2
            patch[row, max(0, mid - half):min(s, mid + half + 1)] = True
        return patch, s, s
    if kind == "bar":
        h = _span(size, 0.045, 0.08, 2, rng)
        w = _span(size, 0.19, 0.33, 6, rng)
        return np.ones((h, w), dtype=bool), h, w
    raise DataError(f"unknown shape kind '{kind}'")


def _paint(image: np.ndarray, segmap: np.ndarray, patch: np.ndarray,
           r0: int, c0: int, color, obj_id: int) -> int:
    h, w = patch.shape
    region = segmap[r0:r0 + h, c0:c0 + w]
    region[patch] = obj_id
    for ch in range(3):
        image[ch, r0:r0 + h, c0:c0 + w][patch] = color[ch]
    return int(patch.sum())


def _context_bar_geometry(size: int, side: str, rng: np.random.Generator):
    """Bar footprint and placement for one half of a context scene."""
    h = _span(size, 0.06, 0.1, 2, rng)
    w = _span(size, 0.19, 0.25, 6, rng)
    r0 = int(rng.integers(size // 4, max(size - size // 4 - h, size // 4 + 1)))
    margin = max(size // 16, 2)
    span = max(size // 2 - 2 * margin - w, 1)
    if side == "left":
        c0 = int(rng.integers(margin, margin + span))
    else:
        c0 = int(rng.integers(size // 2 + margin, size // 2 + margin + span))
    return r0, c0, h, w


def generate_scene(seed: int, config: DataConfig,
                   context_polarity: int | None = None) -> Scene:
    """Render one scene deterministically from its seed.

    `context_polarity` overrides which identity the left bar receives in
    a context scene (the random draw is still consumed, so geometry stays
    identical; only the corner markers change).
    """
    rng = np.random.default_rng(seed)
    size = config.image_size
    image = np.full((3, size, size), BACKGROUND_BASE, dtype=np.float64)
    image += rng.uniform(0.0, config.noise_level, size=image.shape)
    segmap = np.zeros((size, size), dtype=np.int32)
    is_context = rng.random() < config.context_fraction

    if is_context:
        polarity = int(rng.integers(2))
        if context_polarity is not None:
            polarity = int(context_polarity)
        identities = {"left": CONTEXT_CLASSES[polarity], "right": CONTEXT_CLASSES[1 - polarity]}
        objects = []
        for obj_id, side in ((1, "left"), (2, "right")):
            r0, c0, h, w = _context_bar_geometry(size, side, rng)
            patch = np.ones((h, w), dtype=bool)
            n = _paint(image, segmap, patch, r0, c0, CONTEXT_BAR_COLOR, obj_id)
            objects.append(SceneObject(obj_id, identities[side], n))
        m = config.marker_size
        marker_boxes = []
        for (rr, cc), side in (((0, 0), "left"), ((0, size - m), "right"),
                               ((size - m, 0), "left"), ((size - m, size - m), "right")):
            color = MARKER_COLORS[identities[side]]
            for ch in range(3):
                image[ch, rr:rr + m, cc:cc + m] = color[ch]
            marker_boxes.append((rr, cc, rr + m, cc + m))
        return Scene(np.clip(image, 0.0, 1.0), segmap, objects, True, marker_boxes)

    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1)) \
        if config.max_objects > 0 else 0
    occupied = np.zeros((size, size), dtype=bool)
    objects = []
    border = max(1, size // 32)
    gap = max(1, size // 32)
    for obj_id in range(1, n_objects + 1):
        kind = STANDARD_CLASSES[int(rng.integers(len(STANDARD_CLASSES)))]
        placed = False
        for _ in range(PLACE_RETRIES):
            patch, h, w = _shape_mask(kind, size, rng)
            if h + 2 * border >= size or w + 2 * border >= size:
                continue
            r0 = int(rng.integers(border, size - h - border))
            c0 = int(rng.integers(border, size - w - border))
            window = occupied[max(0, r0 - gap):r0 + h + gap, max(0, c0 - gap):c0 + w + gap]
            if window.any():
                continue
            brightness = rng.uniform(0.85, 1.0)
            color = tuple(v * brightness for v in CLASS_COLORS[kind])
            n = _paint(image, segmap, patch, r0, c0, color, obj_id)
            occupied[r0:r0 + h, c0:c0 + w] = True
            objects.append(SceneObject(obj_id, kind, n))
            placed = True
            break
        if not placed:
            raise DataError(f"could not place object {obj_id} ({kind}) after {PLACE_RETRIES} tries")
    return Scene(np.clip(image, 0.0, 1.0), segmap, objects, False, [])


# -- regions --------------------------------------------------------------------


def rasterize_region(region: dict, size: int) -> np.ndarray:
    """Binary (S, S) mask for a stored region geometry."""
    mask = np.zeros((size, size), dtype=np.uint8)
    if region["kind"] == "rect":
        mask[region["r0"]:region["r1"], region["c0"]:region["c1"]] = 1
    elif region["kind"] == "circle":
        yy, xx = np.mgrid[:size, :size]
        mask[(yy - region["cr"]) ** 2 + (xx - region["cc"]) ** 2 <= region["radius"] ** 2] = 1
    else:
        raise DataError(f"unknown region kind '{region['kind']}'")
    return mask


def _sample_region(rng: np.random.Generator, size: int, kind: str,
                   fmin: float, fmax: float, anchor: tuple[int, int] | None) -> dict:
    """One random region; when `anchor` is given the region must cover it."""
    if kind == "rect":
        h = int(rng.integers(max(int(fmin * size), 2), int(fmax * size) + 1))
        w = int(rng.integers(max(int(fmin * size), 2), int(fmax * size) + 1))
        if anchor is None:
            r0 = int(rng.integers(0, size - h + 1))
            c0 = int(rng.integers(0, size - w + 1))
        else:
            ar, ac = anchor
            r0 = int(rng.integers(max(0, ar - h + 1), min(size - h, ar) + 1))
            c0 = int(rng.integers(max(0, ac - w + 1), min(size - w, ac) + 1))
        return {"kind": "rect", "r0": r0, "c0": c0, "r1": r0 + h, "c1": c0 + w}
    radius = int(rng.integers(max(int(fmin * size / 2), 2), int(fmax * size / 2) + 1))
    if anchor is None:
        cr = int(rng.integers(0, size))
        cc = int(rng.integers(0, size))
    else:
        while True:
            dr = int(rng.integers(-radius, radius + 1))
            dc = int(rng.integers(-radius, radius + 1))
            if dr * dr + dc * dc <= radius * radius:
                break
        cr = min(max(anchor[0] + dr, 0), size - 1)
        cc = min(max(anchor[1] + dc, 0), size - 1)
    return {"kind": "circle", "cr": cr, "cc": cc, "radius": radius}


def label_for(mask: np.ndarray, scene: Scene, class_name: str) -> str:
    """At-least-one-pixel rule: yes iff the region overlaps the class."""
    return "yes" if bool((mask.astype(bool) & scene.class_mask(class_name)).any()) else "no"


def _pick_pixel(rng: np.random.Generator, mask: np.ndarray) -> tuple[int, int]:
    rows, cols = np.nonzero(mask)
    i = int(rng.integers(rows.size))
    return int(rows[i]), int(cols[i])


def _forbidden_mask(scene: Scene, avoid_class: str | None) -> np.ndarray:
    size = scene.segmap.shape[0]
    bad = np.zeros((size, size), dtype=bool)
    for r0, c0, r1, c1 in scene.marker_boxes:
        bad[r0:r1, c0:c1] = True
    if avoid_class is not None:
        bad |= scene.class_mask(avoid_class)
    return bad


def _sample_context_region(rng, scene: Scene, target_class: str, other_class: str,
                           kind: str, fmin: float, fmax: float) -> dict:
    """Region hitting the target bar while avoiding the other bar and markers."""
    size = scene.segmap.shape[0]
    target = scene.class_mask(target_class)
    forbidden = _forbidden_mask(scene, other_class)
    lo, hi = fmin, fmax
    for attempt in range(REGION_RETRIES):
        region = _sample_region(rng, size, kind, lo, hi, _pick_pixel(rng, target))
        mask = rasterize_region(region, size).astype(bool)
        if (mask & target).any() and not (mask & forbidden).any():
            return region
        if attempt and attempt % 80 == 0 and hi > lo:
            hi = max(lo, hi * 0.8)   # shrink; big regions are what collide
    raise DataError(f"no admissible region around '{target_class}' after {REGION_RETRIES} tries")


def _sample_standard_region(rng, scene: Scene, class_name: str, want_yes: bool,
                            kind: str, fmin: float, fmax: float) -> dict:
    size = scene.segmap.shape[0]
    pixels = scene.class_mask(class_name)
    lo, hi = fmin, fmax
    for attempt in range(REGION_RETRIES):
        anchor = _pick_pixel(rng, pixels) if want_yes else None
        region = _sample_region(rng, size, kind, lo, hi, anchor)
        mask = rasterize_region(region, size).astype(bool)
        hit = bool((mask & pixels).any())
        if hit == want_yes:
            return region
        if not want_yes and attempt and attempt % 80 == 0 and hi > lo:
            hi = max(lo, hi * 0.8)
    raise DataError(f"could not sample a {'yes' if want_yes else 'no'} region "
                    f"for '{class_name}' after {REGION_RETRIES} tries")


def generate_questions(scene: Scene, n: int, region_kind: str, seed: int,
                       fmin: float = 0.10, fmax: float = 0.50) -> list[dict]:
    """Balanced question records for one scene.

    Emits n records as yes/no pairs cycling over the classes present in
    the scene; every record's answer is re-derived from its mask with the
    at-least-one-pixel rule. Context scenes get bar questions whose "no"
    regions contain the opposite look-alike bar, and are flagged
    `ambiguous` (region shows a bar but excludes every marker).
    """
    if n % 2:
        raise DataError(f"questions per scene must be even, got {n}")
    rng = np.random.default_rng(seed)
    records: list[dict] = []
    classes = scene.present_classes()
    if not classes:
        return []

    for pair_idx in range(n // 2):
        class_name = classes[pair_idx % len(classes)]
        if scene.is_context:
            other = CONTEXT_CLASSES[1 - CONTEXT_CLASSES.index(class_name)]
            for is_yes in (True, False):
                hit = class_name if is_yes else other
                avoid = other if is_yes else class_name
                region = _sample_context_region(rng, scene, hit, avoid,
                                                region_kind, fmin, fmax)
                mask = rasterize_region(region, scene.segmap.shape[0])
                answer = label_for(mask, scene, class_name)
                assert answer == ("yes" if is_yes else "no")
                records.append({"question": f"is there a {class_name} in this region?",
                                "answer": answer, "object": class_name,
                                "region": region, "ambiguous": True})
        else:
            for is_yes in (True, False):
                region = _sample_standard_region(rng, scene, class_name, is_yes,
                                                 region_kind, fmin, fmax)
                mask = rasterize_region(region, scene.segmap.shape[0])
                answer = label_for(mask, scene, class_name)
                assert answer == ("yes" if is_yes else "no")
                records.append({"question": f"is there a {class_name} in this region?",
                                "answer": answer, "object": class_name,
                                "region": region, "ambiguous": False})
    return records


# -- balancing -------------------------------------------------------------------


def balance(records: list[dict], seed: int = 0) -> list[dict]:
    """Equalize yes/no counts inside every (object, split) stratum.

    The majority side is down-sampled with the stream's seed; strata with
    zero of either answer are dropped with a warning. The surviving
    records are shuffled deterministically.
    """
    import warnings

    rng = np.random.default_rng(seed)
    strata: dict[tuple, dict[str, list[dict]]] = {}
    for rec in records:
        key = (rec["object"], rec.get("split", ""))
        strata.setdefault(key, {"yes": [], "no": []})[rec["answer"]].append(rec)
    kept: list[dict] = []
    for key in sorted(strata):
        side = strata[key]
        n = min(len(side["yes"]), len(side["no"]))
        if n == 0:
            warnings.warn(f"stratum {key} has no {'yes' if not side['yes'] else 'no'} answers; dropped")
            continue
        for answer in ("yes", "no"):
            group = side[answer]
            if len(group) > n:
                idx = rng.choice(len(group), size=n, replace=False)
                group = [group[i] for i in sorted(idx)]
            kept.extend(group)
    order = rng.permutation(len(kept))
    return [kept[i] for i in order]


# -- dataset assembly ------------------------------------------------------------


def generate_dataset(config: DataConfig, out_dir) -> dict[str, list[dict]]:
    """Write images, masks, JSONL manifests, and a stats CSV.

    Returns the manifests keyed by split. Everything is derived from
    `config.seed`, so identical calls produce byte-identical trees.
    """
    config.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    split_sizes = (("train", config.n_train_images), ("val", config.n_val_images),
                   ("test", config.n_test_images))
    manifests: dict[str, list[dict]] = {}
    image_id = 0
    for split, count in split_sizes:
        records: list[dict] = []
        for _ in range(count):
            scene = generate_scene(config.seed + image_id, config)
            image_name = f"images/img_{image_id:05d}.ppm"
            write_ppm(out / image_name, scene.image)
            scene_records = generate_questions(
                scene, config.questions_per_image, config.region_kind,
                seed=config.seed + 1_000_000 + image_id,
                fmin=config.region_frac_min, fmax=config.region_frac_max)
            for rec in scene_records:
                rec["image"] = image_name
                rec["image_id"] = image_id
                rec["split"] = split
            records.extend(scene_records)
            image_id += 1
        records = balance(records, seed=config.seed + 2_000_000 + hash_split(split))
        for qid, rec in enumerate(records):
            mask_name = f"masks/{split}_q{qid:06d}.pgm"
            mask = rasterize_region(rec["region"], config.image_size)
            write_pgm(out / mask_name, mask * 255)
            rec["mask"] = mask_name
        manifests[split] = records
        with open(out / f"{split}.jsonl", "w") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    write_stats_csv(out / "stats.csv", manifests)
    (out / "dataset.json").write_text(json.dumps(
        {"config": {k: v for k, v in vars(config).items()}}, indent=1, sort_keys=True) + "\n")
    return manifests


def hash_split(split: str) -> int:
    return {"train": 11, "val": 22, "test": 33}.get(split, 44)


def write_stats_csv(path, manifests: dict[str, list[dict]]) -> None:
    rows = []
    for split in sorted(manifests):
        counts: dict[str, dict[str, int]] = {}
        for rec in manifests[split]:
            c = counts.setdefault(rec["object"], {"yes": 0, "no": 0})
            c[rec["answer"]] += 1
        for obj in sorted(counts):
            rows.append((split, obj, counts[obj]["yes"], counts[obj]["no"]))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("split", "object", "yes", "no"))
        writer.writerows(rows)


def load_manifest(path) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
