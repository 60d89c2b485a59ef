"""Manifests, post-generation filters, external-service clients and input preparation."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .attributes.space import UNKNOWN, default_space
from .numcore.rng import RngStream

log = logging.getLogger(__name__)

FILESIZE_THRESHOLD = 24_000  # bytes; strictly smaller files are dropped
GRAYSCALE_THRESHOLD = 5.0  # mean per-pixel channel-difference variance, 0-255 scale
RECROP_MARGIN = 0.10
INPUT_SIZE = (384, 128)  # (height, width)
NORM_MEAN = 0.5
NORM_STD = 0.5


class ManifestError(ValueError):
    pass


class CorruptImage(ValueError):
    pass


class ClientError(RuntimeError):
    """An external service failed after exhausting its retry budget."""


# -- manifest ---------------------------------------------------------------

@dataclass
class ManifestRecord:
    image: str
    caption: str
    person_id: str | int | None = None
    attributes: list | None = None  # 27 ints (UNKNOWN allowed) or None
    provenance: str = ""

    def __post_init__(self):
        if self.attributes is not None:
            n = len(default_space())
            if len(self.attributes) != n:
                raise ManifestError(f"{self.image}: expected {n} attribute values, got {len(self.attributes)}")
            self.attributes = [UNKNOWN if v is None else int(v) for v in self.attributes]

    def to_json(self) -> str:
        d = {"image": self.image, "caption": self.caption, "person_id": self.person_id,
             "provenance": self.provenance}
        if self.attributes is not None:
            d["attributes"] = self.attributes
        return json.dumps(d, sort_keys=True)

    def attr_vector(self) -> np.ndarray:
        if self.attributes is None:
            return default_space().empty_vector()
        return np.asarray(self.attributes, dtype=np.int8)


def resolve(record: ManifestRecord, root: str | Path) -> Path:
    p = Path(record.image)
    return p if p.is_absolute() else Path(root) / p


def load_manifest(path: str | Path, check_images: bool = True) -> list[ManifestRecord]:
    """One JSON object per line; image paths are relative to the manifest's directory."""
    path = Path(path)
    records, missing = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = ManifestRecord(d["image"], d["caption"], d.get("person_id"), d.get("attributes"),
                                 d.get("provenance", ""))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if check_images and not resolve(rec, path.parent).exists():
            missing.append(rec.image)
        records.append(rec)
    if missing:
        raise ManifestError(f"{len(missing)} image(s) not found, first: {missing[0]}")
    return records


def save_manifest(records: Iterable[ManifestRecord], path: str | Path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


# -- filters ----------------------------------------------------------------

def filter_filesize(path: str | Path, threshold: int = FILESIZE_THRESHOLD) -> bool:
    """Keep iff the file is at least ``threshold`` bytes."""
    try:
        size = os.path.getsize(path)
    except OSError as exc:
        log.error("cannot stat %s: %s", path, exc)
        return False
    return size >= threshold


def grayscale_statistic(pixels: np.ndarray) -> float:
    """Mean over pixels of the variance of (R-G, G-B, B-R); input is HxWx3."""
    x = np.asarray(pixels, dtype=np.float64)
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    diffs = np.stack([r - g, g - b, b - r], axis=-1)
    return float(diffs.var(axis=-1).mean())


def filter_grayscale(pixels: np.ndarray, threshold: float = GRAYSCALE_THRESHOLD) -> bool:
    """Keep iff the channel-difference statistic reaches ``threshold`` (0-255 pixel scale)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[-1] != 3:
        log.warning("not a 3-channel image (shape %s); dropping", pixels.shape)
        return False
    return grayscale_statistic(pixels) >= threshold


# -- external clients -------------------------------------------------------

class PoseClient(Protocol):
    def detect(self, image_path: str) -> list[np.ndarray]:
        """One (K, 3) array of (x, y, confidence) keypoints per detected person."""


class CaptionClient(Protocol):
    def calibrate(self, image_path: str, caption: str) -> str: ...


class _HttpJson:
    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2, min_interval: float = 0.0):
        self.url, self.timeout, self.retries = url, timeout, retries
        self.min_interval = min_interval
        self._lock = threading.Lock()
        self._last = 0.0

    def _throttle(self):
        with self._lock:
            wait = self._last + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()

    def post(self, payload: dict) -> dict:
        body = json.dumps(payload).encode()
        err = None
        for attempt in range(self.retries + 1):
            self._throttle()
            req = urllib.request.Request(self.url, body, {"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read())
            except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
                err = exc
                log.warning("request to %s failed (attempt %d): %s", self.url, attempt + 1, exc)
        raise ClientError(f"{self.url}: {err}")


class HttpPoseClient(_HttpJson):
    """POST {"image": path} -> {"people": [[[x, y, c], ...], ...]}."""

    def __init__(self, url: str | None = None, **kw):
        url = url or os.environ.get("APTM_POSE_URL")
        if not url:
            raise ClientError("no pose endpoint configured (set APTM_POSE_URL)")
        super().__init__(url, **kw)

    def detect(self, image_path):
        people = self.post({"image": str(image_path)}).get("people", [])
        return [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in people]


class HttpCaptionClient(_HttpJson):
    """POST {"image": path, "caption": text} -> {"caption": text}."""

    def __init__(self, url: str | None = None, **kw):
        url = url or os.environ.get("APTM_CAPTION_URL")
        if not url:
            raise ClientError("no caption endpoint configured (set APTM_CAPTION_URL)")
        super().__init__(url, **kw)

    def calibrate(self, image_path, caption):
        return str(self.post({"image": str(image_path), "caption": caption}).get("caption", caption))


class StubPoseClient:
    """Canned responses: a mapping from file name to person list, else one full-frame person."""

    def __init__(self, responses: dict | None = None):
        self.responses = responses or {}

    def detect(self, image_path):
        name = Path(image_path).name
        if name in self.responses:
            out = self.responses[name]
            if isinstance(out, Exception):
                raise out
            return [np.asarray(p, dtype=np.float64) for p in out]
        with Image.open(image_path) as im:
            w, h = im.size
        return [np.array([[0, 0, 1.0], [w - 1, 0, 1.0], [0, h - 1, 1.0], [w - 1, h - 1, 1.0]])]


class StubCaptionClient:
    def calibrate(self, image_path, caption):
        return caption


# -- re-crop ----------------------------------------------------------------

def keypoint_box(keypoints: np.ndarray, width: int, height: int, margin: float = RECROP_MARGIN):
    """Bounding box (left, top, right, bottom) of confident keypoints, grown by ``margin``."""
    kp = np.asarray(keypoints, dtype=np.float64)
    kp = kp[kp[:, 2] > 0] if kp.shape[1] > 2 else kp
    if len(kp) == 0:
        return None
    x0, y0 = kp[:, 0].min(), kp[:, 1].min()
    x1, y1 = kp[:, 0].max() + 1, kp[:, 1].max() + 1
    mx, my = margin * (x1 - x0), margin * (y1 - y0)
    box = (max(0, int(np.floor(x0 - mx))), max(0, int(np.floor(y0 - my))),
           min(width, int(np.ceil(x1 + mx))), min(height, int(np.ceil(y1 + my))))
    return box if box[2] > box[0] and box[3] > box[1] else None


def person_count_reason(people: Sequence) -> str | None:
    if len(people) == 0:
        return "no_person"
    if len(people) > 1:
        return "multiple_persons"
    return None


def recrop(image_path: str | Path, pose_client: PoseClient, margin: float = RECROP_MARGIN):
    """Crop to the single detected person; returns (PIL image or None, drop reason or None)."""
    try:
        people = pose_client.detect(str(image_path))
    except (ClientError, TimeoutError) as exc:
        log.warning("pose detection failed for %s: %s", image_path, exc)
        return None, "pose_error"
    reason = person_count_reason(people)
    if reason:
        return None, reason
    with Image.open(image_path) as im:
        im = im.convert("RGB")
        box = keypoint_box(people[0], im.width, im.height, margin)
        if box is None:
            return None, "no_person"
        return im.crop(box), None


# -- pipeline ---------------------------------------------------------------

@dataclass
class FilterReport:
    total: int = 0
    kept: int = 0
    dropped: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {"total": self.total, "kept": self.kept, "dropped": dict(sorted(self.dropped.items()))}


def _load_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "P", "CMYK", "YCbCr"):
                return np.asarray(im)  # grayscale modes stay single-channel
            return np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise CorruptImage(f"{path}: {exc}") from exc


def check_record(record: ManifestRecord, root: Path, size_threshold=FILESIZE_THRESHOLD,
                 gray_threshold=GRAYSCALE_THRESHOLD, pose_client: PoseClient | None = None) -> str | None:
    """The first rule that rejects ``record``, or None if it survives every rule."""
    path = resolve(record, root)
    if not path.exists():
        return "unreadable"
    if not filter_filesize(path, size_threshold):
        return "filesize"
    try:
        pixels = _load_rgb(path)
    except CorruptImage as exc:
        log.error("%s", exc)
        return "unreadable"
    if not filter_grayscale(pixels, gray_threshold):
        return "grayscale"
    if pose_client is not None:
        try:
            people = pose_client.detect(str(path))
        except (ClientError, TimeoutError) as exc:
            log.warning("pose detection failed for %s: %s", path, exc)
            return "pose_error"
        return person_count_reason(people)
    return None


def run_filters(records: Sequence[ManifestRecord], root: str | Path, *,
                size_threshold: int = FILESIZE_THRESHOLD, gray_threshold: float = GRAYSCALE_THRESHOLD,
                pose_client: PoseClient | None = None, workers: int = 1):
    """Apply the rules in order; every drop is attributed to the first rule that fired."""
    root = Path(root)

    def one(rec):
        return check_record(rec, root, size_threshold, gray_threshold, pose_client)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reasons = list(pool.map(one, records))
    else:
        reasons = [one(r) for r in records]
    report = FilterReport(total=len(records))
    kept = []
    for rec, why in zip(records, reasons):
        if why is None:
            kept.append(rec)
        else:
            report.dropped[why] += 1
    report.kept = len(kept)
    return kept, report


# -- model inputs -----------------------------------------------------------

def load_pixels(path: str | Path, size=INPUT_SIZE) -> np.ndarray:
    """Bilinear resize to ``size`` and normalize to 3xHxW in [-1, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
            x = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise CorruptImage(f"{path}: {exc}") from exc
    return ((x - NORM_MEAN) / NORM_STD).transpose(2, 0, 1).copy()


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[..., ::-1].copy()


def prepare_input(record: ManifestRecord, root: str | Path, vocab, train: bool = False,
                  flip_stream: RngStream | None = None, counter: tuple = (), size=INPUT_SIZE):
    """(pixels 3xHxW, token ids); in training mode flips with p=0.5 drawn from ``flip_stream``."""
    pixels = load_pixels(resolve(record, root), size)
    if train and flip_stream is not None and flip_stream.generator(*counter).random() < 0.5:
        pixels = hflip(pixels)
    return pixels, vocab.tokenize(record.caption)


def load_dataset(records: Sequence[ManifestRecord], root: str | Path, vocab, size=INPUT_SIZE):
    """Decode every record once (eval-mode); corrupt images are skipped with a log line."""
    pixels, ids, attrs, keep = [], [], [], []
    for rec in records:
        try:
            x, t = prepare_input(rec, root, vocab, size=size)
        except CorruptImage as exc:
            log.error("skipping: %s", exc)
            continue
        pixels.append(x)
        ids.append(t)
        attrs.append(rec.attr_vector())
        keep.append(rec)
    if not keep:
        raise ManifestError("no usable records")
    return np.stack(pixels), np.stack(ids), np.stack(attrs), keep
