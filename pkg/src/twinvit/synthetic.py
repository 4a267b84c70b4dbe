"""Bundled synthetic corpora.

``shapes``: ten classes of colored geometric primitives on noisy
backgrounds, used both as the pretraining corpus and as the probe dataset.
``two_class``: all-black vs all-white images, the trivially separable probe
fixture.

Run ``python -m twinvit.synthetic OUT_DIR`` to write a corpus as PPM files
plus ``labels.csv``.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .dataio import save_image

SHAPE_NAMES = (
    "disk", "square", "triangle", "ring", "plus",
    "diamond", "hstripes", "vstripes", "ellipse", "xcross",
)


def _mask(kind: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = y - cy, x - cx
    box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    bar = r * 0.3
    name = SHAPE_NAMES[kind]
    if name == "disk":
        return dx ** 2 + dy ** 2 <= r ** 2
    if name == "square":
        return box
    if name == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if name == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if name == "plus":
        return box & ((np.abs(dx) <= bar) | (np.abs(dy) <= bar))
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if name == "hstripes":
        return box & (np.floor((dy + r) / (r / 2.5)) % 2 == 0)
    if name == "vstripes":
        return box & (np.floor((dx + r) / (r / 2.5)) % 2 == 0)
    if name == "ellipse":
        return (dx / r) ** 2 + (dy / (0.45 * r)) ** 2 <= 1
    return box & ((np.abs(dx - dy) <= bar * 1.2) | (np.abs(dx + dy) <= bar * 1.2))


def shape_image(label: int, size: int, gen: np.random.Generator) -> np.ndarray:
    background = gen.uniform(0.1, 0.6, size=3)
    img = background[:, None, None] + gen.normal(0.0, 0.08, size=(3, size, size))
    r = gen.uniform(0.22, 0.38) * size
    cy, cx = gen.uniform(r, size - r, size=2)
    color = gen.uniform(0.0, 1.0, size=3)
    color[gen.integers(3)] = gen.uniform(0.85, 1.0)  # keep shapes saturated against the background
    mask = _mask(label, size, cy, cx, r)
    img = np.where(mask[None], color[:, None, None], img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def shapes(n: int, size: int = 64, seed: int = 0, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """``n`` images with balanced labels ``i % num_classes``."""
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPE_NAMES)}]")
    labels = np.arange(n) % num_classes
    images = np.stack([
        shape_image(int(lab), size, rngmod.stream(seed, rngmod.SYNTHETIC, i)) for i, lab in enumerate(labels)
    ]) if n else np.zeros((0, 3, size, size), dtype=np.float32)
    return images, labels.astype(np.int64)


def two_class(n_per_class: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """All-black images (label 0) followed by all-white images (label 1)."""
    images = np.concatenate([np.zeros((n_per_class, 3, size, size)), np.ones((n_per_class, 3, size, size))])
    labels = np.repeat([0, 1], n_per_class)
    return images.astype(np.float32), labels.astype(np.int64)


def write_corpus(directory, images: np.ndarray, labels: np.ndarray | None = None, prefix: str = "img") -> list[Path]:
    """Write ``images`` as ``<prefix>_00000.ppm`` ... and, with labels, ``labels.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = directory / f"{prefix}_{i:05d}.ppm"
        save_image(path, img)
        paths.append(path)
    if labels is not None:
        rows = ["path,label"] + [f"{p.name},{int(lab)}" for p, lab in zip(paths, labels)]
        (directory / "labels.csv").write_text("\n".join(rows) + "\n")
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m twinvit.synthetic", description=__doc__.split("\n\n")[0])
    parser.add_argument("out", help="output directory")
    parser.add_argument("--kind", choices=("shapes", "two-class"), default="shapes")
    parser.add_argument("-n", type=int, default=64, help="image count (per class for two-class)")
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--classes", type=int, default=10)
    parser.add_argument("--no-labels", action="store_true", help="omit labels.csv")
    args = parser.parse_args(argv)
    if args.kind == "shapes":
        images, labels = shapes(args.n, args.size, args.seed, args.classes)
    else:
        images, labels = two_class(args.n, args.size)
    write_corpus(args.out, images, None if args.no_labels else labels)
    print(f"wrote {len(images)} images to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
