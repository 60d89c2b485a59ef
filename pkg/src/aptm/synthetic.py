"""Toy pedestrian-like images with matching captions, for smoke and overfit runs.

Each figure is drawn from its attributes (beard or collar, hair length, hat,
sleeves, garment colours and shapes, carried items) as large flat blocks on a
lightly textured background, so every caption describes exactly one image and
every annotated attribute is visible at the model's patch resolution.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from .attributes import annotate
from .datapipe import ManifestRecord, save_manifest

RGB = {
    "black": (20, 20, 20), "white": (235, 235, 235), "red": (200, 30, 30), "purple": (130, 40, 160),
    "yellow": (230, 210, 40), "blue": (40, 70, 200), "green": (40, 150, 60), "gray": (128, 128, 128),
    "pink": (240, 140, 180), "brown": (120, 75, 35),
}
UPPER = ["black", "white", "red", "purple", "yellow", "blue", "green", "gray"]
LOWER = ["black", "white", "purple", "yellow", "blue", "green", "pink", "gray", "brown"]
LOWER_KINDS = {"pants": (0, 1), "shorts": (1, 1), "long skirt": (0, 0), "short skirt": (1, 0)}
ITEMS = [None, "backpack", "handbag", "hat"]
SKIN = (225, 180, 150)
HAIR = (60, 40, 20)


def sample_people(n: int, rng: np.random.Generator) -> list[dict]:
    """``n`` attribute draws with pairwise-distinct captions."""
    seen, out = set(), []
    while len(out) < n:
        p = {
            "man": bool(rng.random() < 0.5),
            "long_hair": bool(rng.random() < 0.5),
            "long_sleeve": bool(rng.random() < 0.5),
            "upper": UPPER[rng.integers(len(UPPER))],
            "lower": LOWER[rng.integers(len(LOWER))],
            "kind": list(LOWER_KINDS)[rng.integers(len(LOWER_KINDS))],
            "item": ITEMS[rng.integers(len(ITEMS))],
        }
        cap = caption(p)
        if cap not in seen:
            seen.add(cap)
            out.append(p)
    return out


def caption(p: dict) -> str:
    who = "man" if p["man"] else "woman"
    hair = "long hair" if p["long_hair"] else "short hair"
    top = "sweater" if p["long_sleeve"] else "t shirt"
    text = f"a {who} with {hair} wearing a {p['upper']} {top} and {p['lower']} {p['kind']}"
    if p["item"] == "hat":
        text += " and a hat"
    elif p["item"]:
        text += f" , carrying a {p['item']}"
    return text


def draw(p: dict, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    bg = rng.integers(60, 200, size=3)
    img = np.clip(bg + rng.normal(0, 10, size=(height, width, 3)), 0, 255)
    h = lambda f: int(round(f * height))  # noqa: E731
    w = lambda f: int(round(f * width))  # noqa: E731

    def box(y0, y1, x0, x1, color):
        img[h(y0):h(y1), w(x0):w(x1)] = color

    box(0.04, 0.16, 0.36, 0.64, SKIN)  # head
    box(0.02, 0.06, 0.34, 0.66, HAIR)  # hair top
    if p["long_hair"]:
        box(0.04, 0.40, 0.22, 0.36, HAIR)
        box(0.04, 0.40, 0.64, 0.78, HAIR)
    if p["item"] == "hat":
        box(0.0, 0.08, 0.22, 0.78, (15, 15, 90))
    if p["man"]:
        box(0.10, 0.16, 0.36, 0.64, (90, 60, 40))  # beard
    else:
        box(0.16, 0.20, 0.30, 0.70, (250, 250, 250))  # collar band
    upper = RGB[p["upper"]]
    top = 0.20 if not p["man"] else 0.16
    box(top, 0.50, 0.28, 0.72, upper)  # torso
    arm = upper if p["long_sleeve"] else SKIN
    box(top, 0.26, 0.10, 0.28, upper)
    box(top, 0.26, 0.72, 0.90, upper)
    box(0.26, 0.48, 0.10, 0.28, arm)
    box(0.26, 0.48, 0.72, 0.90, arm)
    short, trousers = LOWER_KINDS[p["kind"]]
    lower = RGB[p["lower"]]
    end = 0.70 if short else 0.95
    if trousers:
        box(0.50, end, 0.26, 0.48, lower)
        box(0.50, end, 0.52, 0.74, lower)
        box(end, 0.98, 0.30, 0.46, SKIN)
        box(end, 0.98, 0.54, 0.70, SKIN)
    else:
        box(0.50, end, 0.14, 0.86, lower)
        box(end, 0.98, 0.34, 0.46, SKIN)
        box(end, 0.98, 0.54, 0.66, SKIN)
    if p["item"] == "backpack":
        box(0.14, 0.50, 0.80, 1.0, (110, 70, 30))
    elif p["item"] == "handbag":
        box(0.40, 0.62, 0.0, 0.22, (160, 20, 90))
    return img.astype(np.uint8)


def make_manifest(out_dir: str | Path, n: int = 32, seed: int = 0, height: int = 384,
                  width: int = 128) -> Path:
    """Write ``n`` images plus an annotated ``manifest.jsonl`` into ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i, p in enumerate(sample_people(n, rng)):
        name = f"images/{i:04d}.png"
        Image.fromarray(draw(p, height, width, rng)).save(out_dir / name)
        cap = caption(p)
        records.append(ManifestRecord(name, cap, i, annotate(cap).tolist(), provenance="synthetic"))
    path = out_dir / "manifest.jsonl"
    save_manifest(records, path)
    return path


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="write a synthetic image-caption manifest")
    ap.add_argument("out_dir")
    ap.add_argument("-n", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(make_manifest(args.out_dir, args.n, args.seed))


if __name__ == "__main__":
    main()
