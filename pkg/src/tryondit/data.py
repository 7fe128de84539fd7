"""Procedural try-on triplets.

Every example derives from a (garment, model image, try-on) triplet built
from integer pixel logic: a pattern family rendered at an intrinsic
resolution, placed into the scene by translation and integer upscaling
only. No resampling, no blending. That buys two exact invariants:

    tryon * mask      == the placed garment pattern, pixel for pixel
    model_img outside mask == tryon outside mask, pixel for pixel

since the model image differs from the try-on only by wearing a
distractor garment inside the same rectangle.

Tasks over a triplet:

    model_based_tryon  conditions [garment, model_img] -> target tryon
    model_free_tryon   conditions [garment]            -> target tryon
    tryoff             conditions [tryon]              -> target garment

Text ids are [task tag, pattern token, palette token] from a vocabulary
of well under 64 tokens; id 0 is the null token reserved for guidance
dropout.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from . import rng
from .model import NULL_TOKEN
from .tensorio import read_odt, write_odt

TASKS = ("model_based_tryon", "model_free_tryon", "tryoff")
TASK_TOKENS = {"model_based_tryon": 1, "model_free_tryon": 2, "tryoff": 3}
PATTERN_TOKEN_BASE = 8
PALETTE_TOKEN_BASE = 16
VOCAB_SIZE = 32

N_PATTERNS = 8
N_PALETTES = 8

# (fg, bg) color pairs, channel values in [-1, 1]
PALETTES = np.array([
    [[0.9, -0.8, -0.8], [-0.9, -0.9, -0.9]],
    [[-0.8, 0.9, -0.6], [0.8, 0.8, 0.6]],
    [[-0.7, -0.7, 0.9], [0.9, 0.9, -0.9]],
    [[0.9, 0.7, -0.9], [-0.6, -0.2, 0.8]],
    [[0.8, -0.2, 0.8], [-0.9, 0.4, -0.4]],
    [[-0.9, 0.8, 0.8], [0.5, -0.7, 0.1]],
    [[0.9, 0.9, 0.9], [-0.5, -0.5, 0.7]],
    [[-0.2, 0.5, -0.9], [0.9, -0.4, 0.3]],
], dtype=np.float32)

BACKGROUNDS = np.array([
    [-0.65, -0.6, -0.5], [0.55, 0.6, 0.7], [-0.3, 0.25, -0.3], [0.4, -0.1, -0.4],
], dtype=np.float32)

SKIN = np.array([0.75, 0.35, -0.05], dtype=np.float32)
GARMENT_BG = np.array([0.7, 0.7, 0.7], dtype=np.float32)


def render_pattern(pattern_id, palette_id, w, h, phase=0):
    """One pattern tile, shape (3, h, w), exact integer pixel logic."""
    fg, bg = PALETTES[palette_id]
    y, x = np.mgrid[0:h, 0:w]
    if pattern_id == 0:      # horizontal stripes
        pick = (y + phase) % 2 == 0
    elif pattern_id == 1:    # vertical stripes
        pick = (x + phase) % 2 == 0
    elif pattern_id == 2:    # checkerboard
        pick = (x + y + phase) % 2 == 0
    elif pattern_id == 3:    # dot grid
        pick = ((x + phase) % 2 == 0) & ((y + phase // 2) % 2 == 0)
    elif pattern_id == 4:    # diagonal bands
        pick = (x + y + phase) % 4 < 2
    elif pattern_id == 5:    # frame
        t = 1 + phase % 2
        pick = (x < t) | (y < t) | (x >= w - t) | (y >= h - t)
    elif pattern_id == 6:    # concentric rings
        d = np.maximum(np.abs(2 * x - (w - 1)), np.abs(2 * y - (h - 1))) // 2
        pick = (d + phase) % 2 == 0
    elif pattern_id == 7:    # opposing quadrants
        pick = ((x * 2 < w) ^ (y * 2 < h)) ^ (phase % 2 == 1)
    else:
        raise ValueError(f"pattern id {pattern_id} out of range")
    tile = np.where(pick[None, :, :], fg[:, None, None], bg[:, None, None])
    return tile.astype(np.float32)


def upscale(tile, s):
    """Exact integer upscale of (3, h, w) by s."""
    return np.kron(tile, np.ones((1, s, s), dtype=tile.dtype))


@dataclass(frozen=True)
class TripletAttrs:
    seed: int
    pattern: int
    palette: int
    distractor_pattern: int
    distractor_palette: int
    background: int
    pose: int
    scale: int
    phase: int
    rect: tuple  # (x0, y0, w, h) of the garment region in scene coords


@dataclass
class Triplet:
    garment: np.ndarray    # (3, S, S)
    model_img: np.ndarray  # (3, S, S)
    tryon: np.ndarray      # (3, S, S)
    mask: np.ndarray       # (S, S) bool, garment region in tryon coords
    attrs: TripletAttrs


def _scene(size, background_id, pose_dx):
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = BACKGROUNDS[background_id][:, None, None]
    cx = size // 2 + pose_dx
    # head
    img[:, size // 16 + 1:size // 4 + 1, cx - size // 8:cx + size // 8] = SKIN[:, None, None]
    # torso column (mostly hidden under the garment rect)
    img[:, size // 4 + 1:size * 13 // 16, cx - size * 3 // 16:cx + size * 3 // 16] = \
        SKIN[:, None, None] * 0.8
    # legs
    img[:, size * 13 // 16:, cx - size // 8:cx - size // 16] = SKIN[:, None, None] * 0.6
    img[:, size * 13 // 16:, cx + size // 16:cx + size // 8] = SKIN[:, None, None] * 0.6
    return img


def gen_triplet(seed, image_size=16) -> Triplet:
    """Deterministic triplet from a seed; bit-identical across runs."""
    if image_size % 4 or image_size < 8:
        raise ValueError(
            f"image size must be a multiple of 4 and at least 8, got {image_size}")
    gen = rng.stream(seed, "triplet")
    pattern = int(gen.integers(N_PATTERNS))
    palette = int(gen.integers(N_PALETTES))
    while True:
        d_pattern = int(gen.integers(N_PATTERNS))
        d_palette = int(gen.integers(N_PALETTES))
        if (d_pattern, d_palette) != (pattern, palette):
            break
    background = int(gen.integers(len(BACKGROUNDS)))
    pose = int(gen.integers(4))
    scale = int(2 ** gen.integers(2))          # 1 or 2, integer upscale
    phase = int(gen.integers(4))

    s = image_size
    rect_side = s // 2
    x0 = s // 4 + (pose - 1) * max(1, s // 16)
    y0 = (3 * s) // 8
    rect = (x0, y0, rect_side, rect_side)

    tile = render_pattern(pattern, palette, rect_side // scale, rect_side // scale, phase)
    placed = upscale(tile, scale)
    d_tile = render_pattern(d_pattern, d_palette, rect_side // scale, rect_side // scale, phase)
    d_placed = upscale(d_tile, scale)

    pose_dx = (pose - 1) * max(1, s // 16)
    tryon = _scene(s, background, pose_dx)
    model_img = tryon.copy()
    tryon[:, y0:y0 + rect_side, x0:x0 + rect_side] = placed
    model_img[:, y0:y0 + rect_side, x0:x0 + rect_side] = d_placed

    mask = np.zeros((s, s), dtype=bool)
    mask[y0:y0 + rect_side, x0:x0 + rect_side] = True

    garment = np.empty((3, s, s), dtype=np.float32)
    garment[:] = GARMENT_BG[:, None, None]
    g0 = (s - rect_side) // 2
    garment[:, g0:g0 + rect_side, g0:g0 + rect_side] = placed

    attrs = TripletAttrs(seed, pattern, palette, d_pattern, d_palette,
                         background, pose, scale, phase, rect)
    return Triplet(garment, model_img, tryon, mask, attrs)


@dataclass
class TaskInstance:
    task: str
    conditions: list
    text_ids: np.ndarray
    target: np.ndarray
    mask: np.ndarray | None
    attrs: TripletAttrs


def text_ids_for(task, attrs: TripletAttrs):
    return np.array([TASK_TOKENS[task],
                     PATTERN_TOKEN_BASE + attrs.pattern,
                     PALETTE_TOKEN_BASE + attrs.palette], dtype=np.int64)


def make_task(triplet: Triplet, task: str) -> TaskInstance:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; tasks are {TASKS}")
    a = triplet.attrs
    ids = text_ids_for(task, a)
    if task == "model_based_tryon":
        return TaskInstance(task, [triplet.garment, triplet.model_img], ids,
                            triplet.tryon, triplet.mask, a)
    if task == "model_free_tryon":
        return TaskInstance(task, [triplet.garment], ids, triplet.tryon, triplet.mask, a)
    return TaskInstance(task, [triplet.tryon], ids, triplet.garment, None, a)


def task_arity(task):
    return 2 if task == "model_based_tryon" else 1


class Dataset:
    """A seeded collection of triplets, optionally persisted to disk."""

    def __init__(self, triplets, seed, image_size):
        self.triplets = triplets
        self.seed = seed
        self.image_size = image_size

    def __len__(self):
        return len(self.triplets)

    def __getitem__(self, i):
        return self.triplets[i]

    @classmethod
    def generate(cls, seed, size, image_size=16):
        trips = [gen_triplet(rng_seed, image_size)
                 for rng_seed in _item_seeds(seed, size)]
        return cls(trips, seed, image_size)

    def save(self, dirpath, ppm=False):
        os.makedirs(dirpath, exist_ok=True)
        stack = {
            "garment": np.stack([t.garment for t in self.triplets]),
            "model_img": np.stack([t.model_img for t in self.triplets]),
            "tryon": np.stack([t.tryon for t in self.triplets]),
            "mask": np.stack([t.mask for t in self.triplets]).astype(np.float32),
        }
        for name, arr in stack.items():
            write_odt(os.path.join(dirpath, name + ".odt"), arr)
        manifest = {
            "seed": self.seed,
            "size": len(self.triplets),
            "image_size": self.image_size,
            "attrs": [asdict(t.attrs) for t in self.triplets],
        }
        with open(os.path.join(dirpath, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1)
        if ppm:
            from .tensorio import write_ppm
            img_dir = os.path.join(dirpath, "ppm")
            os.makedirs(img_dir, exist_ok=True)
            for i, t in enumerate(self.triplets[:16]):
                for part in ("garment", "model_img", "tryon"):
                    write_ppm(os.path.join(img_dir, f"{i:03d}_{part}.ppm"),
                              getattr(t, part))

    @classmethod
    def load(cls, dirpath):
        with open(os.path.join(dirpath, "manifest.json")) as f:
            manifest = json.load(f)
        arrs = {name: read_odt(os.path.join(dirpath, name + ".odt"))
                for name in ("garment", "model_img", "tryon", "mask")}
        trips = []
        for i, attrs in enumerate(manifest["attrs"]):
            attrs["rect"] = tuple(attrs["rect"])
            trips.append(Triplet(
                arrs["garment"][i].astype(np.float32),
                arrs["model_img"][i].astype(np.float32),
                arrs["tryon"][i].astype(np.float32),
                arrs["mask"][i] > 0.5,
                TripletAttrs(**attrs),
            ))
        return cls(trips, manifest["seed"], manifest["image_size"])


def _item_seeds(seed, size):
    # independent per-item seeds so any item regenerates without the rest
    gen = rng.stream(seed, "dataset")
    return [int(x) for x in gen.integers(0, 2 ** 62, size=size)]


def plan_batch(step, stage_tasks, batch_size, dataset_size, seed):
    """Composition of one training batch; pure function of (seed, step).

    Every batch holds a single task, so the reference count is uniform
    within the batch by construction. When the stage allows both the
    two-reference task and single-reference tasks, arity alternates
    batch-for-batch (a 1:1 interleave).
    """
    gen = rng.stream(seed, "batch", step)
    two_ref = [t for t in stage_tasks if task_arity(t) == 2]
    one_ref = [t for t in stage_tasks if task_arity(t) == 1]
    if two_ref and one_ref:
        pool = two_ref if step % 2 == 0 else one_ref
    else:
        pool = two_ref or one_ref
    task = pool[int(gen.integers(len(pool)))]
    indices = gen.integers(0, dataset_size, size=batch_size)
    return task, [int(i) for i in indices]


def make_eval_set(seed, n, tasks=TASKS, image_size=16):
    """Held-out task instances; seeds disjoint from any training dataset
    seeded differently."""
    items = []
    gen = rng.stream(seed, "eval")
    for i in range(n):
        trip = gen_triplet(int(gen.integers(0, 2 ** 62)), image_size)
        items.append(make_task(trip, tasks[i % len(tasks)]))
    return items
