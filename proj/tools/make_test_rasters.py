# SPDX-License-Identifier: Apache-2.0
"""Regenerates the bundled test rasters under tests/data.

Eight 64x64 underwater-style scenes with uneven lighting, plus a binary
object mask per scene (white = object). Deterministic for a given seed.

    python3 tools/make_test_rasters.py [--out tests/data] [--seed 2024]
"""

import argparse
import pathlib

import numpy as np
from PIL import Image

SIZE = 64


def scene(rng: np.random.Generator):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)

    # Water column: blue-green, darker with depth.
    depth = yy / SIZE
    water = np.stack([
        10 + 25 * (1 - depth),
        70 + 70 * (1 - depth) * rng.uniform(0.7, 1.0),
        90 + 80 * (1 - depth) * rng.uniform(0.7, 1.0),
    ], axis=-1)

    # Sandy floor band.
    floor_y = rng.uniform(0.55, 0.8) * SIZE + 3 * np.sin(xx / rng.uniform(5, 9))
    floor = yy > floor_y
    sand = np.array([rng.uniform(90, 140), rng.uniform(110, 150), rng.uniform(90, 120)])
    img = np.where(floor[..., None], sand + rng.normal(0, 8, (SIZE, SIZE, 1)), water)

    # One object (rock or fish) that becomes the mask.
    cy, cx = rng.uniform(0.3, 0.7) * SIZE, rng.uniform(0.25, 0.75) * SIZE
    ry, rx = rng.uniform(6, 12), rng.uniform(8, 16)
    angle = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    obj = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if rng.random() < 0.5:
        tail = (np.abs(v) < (u + rx + 6) * 0.6) & (u < -rx + 1) & (u > -rx - 6)
        obj |= tail
    colour = np.array([rng.uniform(120, 220), rng.uniform(60, 160), rng.uniform(30, 110)])
    texture = rng.normal(0, 12, (SIZE, SIZE, 1))
    img = np.where(obj[..., None], colour + texture, img)

    # Non-uniform light: a bright cone from above plus a dark vignette.
    ly, lx = rng.uniform(-0.2, 0.4) * SIZE, rng.uniform(0.2, 0.8) * SIZE
    spread = rng.uniform(0.25, 0.5) * SIZE
    cone = np.exp(-((yy - ly) ** 2 + (xx - lx) ** 2) / (2 * spread ** 2))
    vignette = 1 - 0.45 * (((yy - SIZE / 2) ** 2 + (xx - SIZE / 2) ** 2) / (SIZE ** 2 / 2))
    gain = rng.uniform(0.35, 0.8) + rng.uniform(0.6, 1.3) * cone
    img = img * (gain * vignette)[..., None]
    img += rng.normal(0, 2.0, img.shape)

    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    mask = (obj * 255).astype(np.uint8)
    return raster, mask


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "tests" / "data"))
    parser.add_argument("--seed", type=int, default=2024)
    parser.add_argument("--count", type=int, default=8)
    args = parser.parse_args()

    out = pathlib.Path(args.out)
    (out / "raw").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        raster, mask = scene(rng)
        Image.fromarray(raster, "RGB").save(out / "raw" / f"scene{i}.png")
        Image.fromarray(mask, "L").save(out / "masks" / f"scene{i}.png")


if __name__ == "__main__":
    main()
