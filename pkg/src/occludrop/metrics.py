"""Verification and identification metrics plus the occluded test split.

Scores are cosine similarities throughout. Thresholds for the accept-rate
curve come from a fixed candidate set (the observed scores plus a sentinel
above the maximum) so the sorted implementation and the exhaustive oracle
return identical tuples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class EvalPairSet:
    """Verification pairs: two embedding blocks plus same-identity flags."""

    emb_a: np.ndarray
    emb_b: np.ndarray
    same: np.ndarray
    provenance: str = "clean"

    def __post_init__(self):
        if len(self.emb_a) != len(self.emb_b) or len(self.emb_a) != len(self.same):
            raise ContractError("pair arrays must share their leading dimension")

    @property
    def genuine_count(self) -> int:
        return int(np.sum(self.same))

    @property
    def impostor_count(self) -> int:
        return int(np.sum(~self.same))

    def scores(self) -> np.ndarray:
        return cosine_similarity(self.emb_a, self.emb_b)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1) + 1e-12
    nb = np.linalg.norm(b, axis=1) + 1e-12
    return np.sum(a * b, axis=1) / (na * nb)


def build_pairs(
    embeddings: np.ndarray,
    labels: np.ndarray,
    genuine: int,
    impostor: int,
    rng: np.random.Generator,
    provenance: str = "clean",
) -> EvalPairSet:
    """Sample genuine and impostor index pairs without replacement pressure."""
    labels = np.asarray(labels)
    n = len(labels)
    ia, ib, same = [], [], []
    by_id = {identity: np.nonzero(labels == identity)[0] for identity in np.unique(labels)}
    multi = [identity for identity, idx in by_id.items() if len(idx) >= 2]
    if not multi:
        raise ContractError("need at least one identity with two embeddings for genuine pairs")
    for _ in range(genuine):
        identity = multi[int(rng.integers(0, len(multi)))]
        a, b = rng.choice(by_id[identity], size=2, replace=False)
        ia.append(a), ib.append(b), same.append(True)
    for _ in range(impostor):
        while True:
            a, b = rng.integers(0, n, size=2)
            if labels[a] != labels[b]:
                break
        ia.append(int(a)), ib.append(int(b)), same.append(False)
    return EvalPairSet(
        emb_a=embeddings[np.asarray(ia)],
        emb_b=embeddings[np.asarray(ib)],
        same=np.asarray(same),
        provenance=provenance,
    )


@dataclass
class FarPoint:
    far_target: float
    tar: float
    threshold: float
    achieved_far: float
    resolvable: bool
    required_impostors: int


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Observed scores plus a sentinel that accepts nothing."""
    return np.concatenate([np.unique(scores), [np.max(scores) + 1.0]])


def tar_at_far(pairs: EvalPairSet, far_targets) -> list:
    """Accept rate of genuine pairs at the loosest threshold meeting each
    false-accept budget.

    Acceptance is score >= threshold. For each target the smallest candidate
    threshold whose impostor accept rate stays within the target is chosen
    (that maximizes the genuine accept rate). Targets below 1/#impostors
    cannot be distinguished from zero on this pair set and are flagged
    unresolvable, with the impostor count that would be required.
    """
    scores = pairs.scores()
    g = scores[pairs.same]
    im = scores[~pairs.same]
    if len(g) == 0 or len(im) == 0:
        raise ContractError(
            f"need at least one genuine and one impostor pair, got {len(g)} and {len(im)}"
        )
    cands = candidate_thresholds(scores)
    im_sorted = np.sort(im)
    g_sorted = np.sort(g)
    out = []
    for target in far_targets:
        # accepted impostors at threshold t: len(im) - searchsorted_left(t)
        far = (len(im) - np.searchsorted(im_sorted, cands, side="left")) / len(im)
        ok = np.nonzero(far <= target)[0]
        t = cands[ok[0]]
        tar = (len(g) - np.searchsorted(g_sorted, t, side="left")) / len(g)
        resolvable = target >= 1.0 / len(im)
        out.append(
            FarPoint(
                far_target=float(target),
                tar=float(tar),
                threshold=float(t),
                achieved_far=float(far[ok[0]]),
                resolvable=bool(resolvable),
                required_impostors=int(math.ceil(1.0 / target)) if not resolvable else len(im),
            )
        )
    return out


def rank1_identification(
    gallery_emb: np.ndarray,
    gallery_labels: np.ndarray,
    probe_emb: np.ndarray,
    probe_labels: np.ndarray,
) -> float:
    """Fraction of probes whose cosine-nearest gallery entry shares their identity."""
    if len(gallery_emb) == 0:
        raise ContractError("gallery is empty")
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    missing = set(probe_labels.tolist()) - set(gallery_labels.tolist())
    if missing:
        raise ContractError(f"probe identities missing from gallery: {sorted(missing)}")
    gn = gallery_emb / (np.linalg.norm(gallery_emb, axis=1, keepdims=True) + 1e-12)
    pn = probe_emb / (np.linalg.norm(probe_emb, axis=1, keepdims=True) + 1e-12)
    sims = pn @ gn.T
    nearest = np.argmax(sims, axis=1)  # ties resolve to the lowest index
    return float(np.mean(gallery_labels[nearest] == probe_labels))


@dataclass
class OccludedTestSpec:
    """Rectangle occluder: side fractions of the image, uniform position,
    constant mean-gray fill, applied only at test time."""

    fraction_min: float = 0.3
    fraction_max: float = 0.5
    fill: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.fraction_min <= self.fraction_max <= 1.0):
            raise ContractError(
                f"occluder fractions [{self.fraction_min}, {self.fraction_max}] must lie in [0, 1]"
            )


@dataclass
class OccluderBox:
    y: int
    x: int
    height: int
    width: int


def build_occluded_split(images: np.ndarray, spec: OccludedTestSpec):
    """Pair each clean test image with an occluded twin; seed-deterministic.

    Returns (occluded images, per-image OccluderBox records). The occluded
    pixel count is exactly floor(f_h*H) * floor(f_w*W) per image.
    """
    n, _, h, w = images.shape
    rng = np.random.default_rng(spec.seed)
    out = images.copy()
    boxes = []
    for t in range(n):
        fh = rng.uniform(spec.fraction_min, spec.fraction_max)
        fw = rng.uniform(spec.fraction_min, spec.fraction_max)
        bh, bw = int(fh * h), int(fw * w)
        if bh > h or bw > w:
            raise ContractError(f"occluder {bh}x{bw} exceeds image {h}x{w}")
        y = int(rng.integers(0, h - bh + 1)) if bh < h else 0
        x = int(rng.integers(0, w - bw + 1)) if bw < w else 0
        out[t, :, y : y + bh, x : x + bw] = spec.fill
        boxes.append(OccluderBox(y=y, x=x, height=bh, width=bw))
    return out, boxes


def write_metrics_csv(path, rows) -> None:
    """Rows of (metric, split, value, threshold, seed_fingerprint)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("metric,split,value,threshold,seed_fingerprint\n")
        for metric, split, value, threshold, fp in rows:
            thr = "" if threshold is None else repr(float(threshold))
            fh.write(f"{metric},{split},{value!r},{thr},{fp}\n")
