"""Seeded synthetic identity dataset plus directory ingestion.

Each identity is a procedurally drawn face-like glyph: an elliptical head
with eyes, brows, nose and mouth whose positions, sizes and intensities are
identity parameters. Every image re-renders the identity under small
geometric and photometric jitter. Rendering is analytic (shapes evaluated
on a transformed coordinate grid), so images are deterministic functions of
(data_seed, identity, image_index) and generation order does not matter.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) floats in [0, 1]
    labels: np.ndarray  # (N,) identity indices
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_ids: int

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def train_split(self):
        return self.images[self.train_idx], self.labels[self.train_idx]

    def test_split(self):
        return self.images[self.test_idx], self.labels[self.test_idx]


def worker_count() -> int:
    """Data-preparation parallelism, capped by OCCLUDROP_THREADS."""
    cap = os.environ.get("OCCLUDROP_THREADS", "")
    if cap.strip():
        try:
            return max(1, int(cap))
        except ValueError as exc:
            raise DataError(f"OCCLUDROP_THREADS must be an integer, got {cap!r}") from exc
    return min(4, os.cpu_count() or 1)


def _identity_params(data_seed: int, identity: int) -> dict:
    rng = np.random.default_rng([data_seed, 1000 + identity])
    marks = [
        (
            rng.uniform(-0.45, 0.45),
            rng.uniform(-0.55, 0.6),
            rng.uniform(0.05, 0.14),
            rng.uniform(0.0, 1.0),
        )
        for _ in range(3)
    ]
    return {
        "background": rng.uniform(0.05, 0.30),
        "face": (
            rng.uniform(-0.06, 0.06),
            rng.uniform(-0.06, 0.06),
            rng.uniform(0.55, 0.85),
            rng.uniform(0.68, 0.95),
            rng.uniform(0.45, 0.85),
        ),
        "hair_h": rng.uniform(0.10, 0.40),
        "hair_value": rng.uniform(0.0, 1.0),
        "eye_y": rng.uniform(-0.45, -0.20),
        "eye_dx": rng.uniform(0.18, 0.42),
        "eye_r": rng.uniform(0.05, 0.15),
        "eye_aspect": rng.uniform(0.5, 1.4),
        "eye_value": rng.uniform(0.0, 0.35),
        "brow_dy": rng.uniform(0.08, 0.22),
        "brow_angle": rng.uniform(-0.5, 0.5),
        "brow_len": rng.uniform(0.10, 0.26),
        "brow_value": rng.uniform(0.0, 1.0),
        "nose_len": rng.uniform(0.12, 0.38),
        "nose_width": rng.uniform(0.03, 0.10),
        "nose_value": rng.uniform(0.0, 1.0),
        "mouth_y": rng.uniform(0.28, 0.58),
        "mouth_w": rng.uniform(0.12, 0.34),
        "mouth_curve": rng.uniform(-0.6, 0.6),
        "mouth_th": rng.uniform(0.03, 0.09),
        "mouth_value": rng.uniform(0.0, 0.4),
        "marks": marks,
    }


def _paint(img, weight, value):
    return img * (1.0 - weight) + value * weight


def _ellipse(xs, ys, cx, cy, rx, ry, soft):
    d = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2
    return np.clip((1.0 - d) / soft, 0.0, 1.0)


def _bar(xs, ys, cx, cy, half_w, half_h, angle, soft):
    ca, sa = np.cos(angle), np.sin(angle)
    xl = ca * (xs - cx) + sa * (ys - cy)
    yl = -sa * (xs - cx) + ca * (ys - cy)
    wx = np.clip((half_w - np.abs(xl)) / soft, 0.0, 1.0)
    wy = np.clip((half_h - np.abs(yl)) / soft, 0.0, 1.0)
    return wx * wy


def render_identity_image(data_seed: int, identity: int, image_index: int, size: int) -> np.ndarray:
    """Draw one jittered view of the identity's glyph; values in [0, 1]."""
    p = _identity_params(data_seed, identity)
    jrng = np.random.default_rng([data_seed, identity, image_index])
    dx, dy = jrng.uniform(-0.06, 0.06, size=2)
    rot = jrng.uniform(-0.08, 0.08)
    zoom = jrng.uniform(0.92, 1.08)
    brightness = jrng.uniform(-0.05, 0.05)
    contrast = jrng.uniform(0.9, 1.1)

    axis = np.linspace(-1.0, 1.0, size)
    ys, xs = np.meshgrid(axis, axis, indexing="ij")
    ca, sa = np.cos(rot), np.sin(rot)
    xt = (ca * (xs - dx) + sa * (ys - dy)) / zoom
    yt = (-sa * (xs - dx) + ca * (ys - dy)) / zoom

    soft = 3.0 / size
    img = np.full((size, size), p["background"])
    fcx, fcy, frx, fry, fval = p["face"]
    face_w = _ellipse(xt, yt, fcx, fcy, frx, fry, soft * 4)
    img = _paint(img, face_w, fval)
    hair_top = fcy - fry
    hair = np.clip((hair_top + p["hair_h"] - yt) / (soft * 2), 0.0, 1.0)
    img = _paint(img, face_w * hair, p["hair_value"])
    for mx_, my_, mr_, mv_ in p["marks"]:
        img = _paint(
            img, face_w * _ellipse(xt, yt, fcx + mx_, fcy + my_, mr_, mr_, soft * 4), mv_
        )
    for side in (-1.0, 1.0):
        ex = fcx + side * p["eye_dx"]
        ey = fcy + p["eye_y"]
        img = _paint(
            img,
            _ellipse(xt, yt, ex, ey, p["eye_r"], p["eye_r"] * p["eye_aspect"], soft * 6),
            p["eye_value"],
        )
        img = _paint(
            img,
            _bar(
                xt,
                yt,
                ex,
                ey - p["eye_r"] * p["eye_aspect"] - p["brow_dy"],
                p["brow_len"],
                0.03,
                side * p["brow_angle"],
                soft,
            ),
            p["brow_value"],
        )
    img = _paint(
        img,
        _bar(xt, yt, fcx, fcy + p["nose_len"] / 2, p["nose_width"], p["nose_len"], 0.0, soft),
        p["nose_value"],
    )
    mx = xt - fcx
    mouth_curve_y = fcy + p["mouth_y"] + p["mouth_curve"] * mx**2
    wband = np.clip((p["mouth_th"] - np.abs(yt - mouth_curve_y)) / soft, 0.0, 1.0)
    wspan = np.clip((p["mouth_w"] - np.abs(mx)) / soft, 0.0, 1.0)
    img = _paint(img, wband * wspan, p["mouth_value"])

    img = (img - 0.5) * contrast + 0.5 + brightness
    img = img + jrng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(
    num_ids: int, images_per_id: int, image_size: int, data_seed: int
) -> Dataset:
    """Render the full dataset; parallel-safe because every image is an
    independent function of its (seed, identity, index) triple."""
    n = num_ids * images_per_id
    images = np.empty((n, 1, image_size, image_size))
    jobs = [(identity, j) for identity in range(num_ids) for j in range(images_per_id)]

    def render(job):
        identity, j = job
        images[identity * images_per_id + j, 0] = render_identity_image(
            data_seed, identity, j, image_size
        )

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(render, jobs))
    else:
        for job in jobs:
            render(job)
    labels = np.repeat(np.arange(num_ids), images_per_id)
    return Dataset(
        images=images,
        labels=labels,
        train_idx=_split_indices(labels, train=True),
        test_idx=_split_indices(labels, train=False),
        num_ids=num_ids,
    )


def _split_indices(labels: np.ndarray, train: bool, train_fraction: float = 0.8) -> np.ndarray:
    """Per identity, the first train_fraction of images (by index) train."""
    idx = []
    for identity in np.unique(labels):
        members = np.nonzero(labels == identity)[0]
        cut = int(round(train_fraction * len(members)))
        idx.append(members[:cut] if train else members[cut:])
    return np.concatenate(idx)


def load_directory(root, image_size: int) -> Dataset:
    """Ingest `<root>/<identity>/<image>.png` (grayscale or RGB, converted).

    Images must already be image_size x image_size; alignment and resizing
    are out of scope.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    id_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not id_dirs:
        raise DataError(f"dataset root {root} contains no identity directories")
    images, labels = [], []
    for label, id_dir in enumerate(id_dirs):
        files = sorted(id_dir.glob("*.png"))
        if not files:
            raise DataError(f"identity directory {id_dir} contains no .png images")
        for f in files:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            if arr.shape != (image_size, image_size):
                raise DataError(
                    f"{f} has size {arr.shape[::-1]}, expected {image_size}x{image_size}"
                )
            images.append(arr[None])
            labels.append(label)
    images = np.stack(images)
    labels = np.asarray(labels)
    return Dataset(
        images=images,
        labels=labels,
        train_idx=_split_indices(labels, train=True),
        test_idx=_split_indices(labels, train=False),
        num_ids=len(id_dirs),
    )


def save_png_tree(dataset: Dataset, out_dir) -> None:
    """Write the dataset as 8-bit grayscale PNGs in identity subdirectories."""
    from PIL import Image

    out_dir = Path(out_dir)
    for identity in range(dataset.num_ids):
        id_dir = out_dir / f"{identity:04d}"
        id_dir.mkdir(parents=True, exist_ok=True)
        members = np.nonzero(dataset.labels == identity)[0]
        for j, idx in enumerate(members):
            arr = np.clip(np.round(dataset.images[idx, 0] * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(id_dir / f"img_{j:04d}.png")
