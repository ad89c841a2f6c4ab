"""Synthetic connectomes with a planted ground-truth parcellation."""
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from data_model import (
    BrainMask,
    Parcellation,
    SparseConnectivity,
    ValidationError,
    as_generator,
    derive_seed,
    write_connectivity,
    write_mask,
    write_parcellation,
)

log = logging.getLogger(__name__)

ROW_BLOCK = 256
SIGNATURES = ("ring", "identity")


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple = (20, 20, 10)
    k_true: int = 5
    within_strength: float = 1.0
    between_strength: float = 0.0
    noise: float = 0.1
    density: float = 0.3
    signature: str = "ring"
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        problems = []
        if len(dims) != 3 or min(dims) < 1:
            problems.append(f"dims {dims}")
        if self.k_true < 1 or self.k_true > math.prod(dims):
            problems.append(f"k_true {self.k_true}")
        if not self.within_strength > self.between_strength >= 0:
            problems.append("need within_strength > between_strength >= 0")
        if self.noise < 0:
            problems.append("noise must be >= 0")
        if not 0 < self.density <= 1:
            problems.append("density must lie in (0, 1]")
        if self.signature not in SIGNATURES:
            problems.append(f"signature must be one of {', '.join(SIGNATURES)}")
        if problems:
            raise ValidationError("invalid spec: " + "; ".join(problems))


@dataclass(frozen=True, eq=False)
class SynthInstance:
    spec: SynthSpec
    mask: BrainMask
    conn: SparseConnectivity
    truth: Parcellation
    affinity: np.ndarray
    sampled_pairs: int

    @property
    def sampled_density(self):
        """Fraction of voxel pairs drawn; clamped strengths leave fewer stored entries."""
        n = self.mask.n
        return self.sampled_pairs / (n * (n - 1) / 2) if n > 1 else 0.0


def _bisect(lo, hi, k):
    """Split the box [lo, hi) into k boxes, halving the longest side each time."""
    if k == 1:
        return [(lo, hi)]
    extent = hi - lo
    axis = int(np.argmax(extent))
    length = int(extent[axis])
    area = int(np.prod(extent)) // length
    left = k // 2
    cut = min(max(int(math.floor(length * left / k + 0.5)), 1), length - 1)
    # both halves must hold at least as many voxels as regions
    left = min(max(left, k - (length - cut) * area, 1), cut * area, k - 1)
    mid_hi, mid_lo = hi.copy(), lo.copy()
    mid_hi[axis] = mid_lo[axis] = lo[axis] + cut
    return _bisect(lo, mid_hi, left) + _bisect(mid_lo, hi, k - left)


def planted_regions(mask, k_true):
    """k_true compact boxes from recursive bisection of the grid."""
    boxes = _bisect(np.zeros(3, dtype=np.int64), np.array(mask.dims, dtype=np.int64), k_true)
    labels = np.zeros(mask.n, dtype=np.int64)
    for label, (lo, hi) in enumerate(boxes, start=1):
        inside = ((mask.coords >= lo) & (mask.coords < hi)).all(axis=1)
        labels[inside] = label
    return Parcellation(labels, k_true)


def signature_affinity(k_true, signature="ring"):
    """Symmetric 0/1 region-to-target affinity with a unit diagonal.

    A ring signature links region r to itself and to r - 1 and r + 1 (mod
    k_true). Below four regions a ring row would cover every target, so
    those fall back to one target per region.
    """
    affinity = np.eye(k_true, dtype=bool)
    if signature == "ring" and k_true >= 4:
        r = np.arange(k_true)
        affinity[r, (r + 1) % k_true] = True
        affinity[(r + 1) % k_true, r] = True
    elif signature == "ring":
        log.debug("ring signature needs four regions, using identity for %d", k_true)
    return affinity


def _row_block(spec, region, affinity, start, stop):
    n = region.size
    rows, cols, weights = [], [], []
    sampled = 0
    for i in range(start, stop):
        rng = np.random.default_rng(derive_seed(spec.seed, 1, i))
        hit = np.flatnonzero(rng.random(n - i - 1) < spec.density) + i + 1
        sampled += hit.size
        strength = np.where(
            affinity[region[i], region[hit]], spec.within_strength, spec.between_strength
        )
        if spec.noise > 0:
            strength = strength + spec.noise * rng.standard_normal(hit.size)
        keep = strength > 0
        rows.append(np.full(int(keep.sum()), i, dtype=np.int64))
        cols.append(hit[keep])
        weights.append(strength[keep])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(weights), sampled


def generate(spec, n_jobs=1):
    """Mask, connectivity and planted truth for `spec`.

    Pair (i, j) is sampled with probability `density`; its strength is
    within_strength when the two planted regions are linked in the
    signature affinity, between_strength otherwise, plus Gaussian noise
    clamped at 0. Every row draws from its own generator keyed by (seed, i).
    """
    mask = BrainMask.full(spec.dims)
    truth = planted_regions(mask, spec.k_true)
    affinity = signature_affinity(spec.k_true, spec.signature)
    region = truth.labels - 1
    blocks = [(s, min(s + ROW_BLOCK, mask.n)) for s in range(0, mask.n, ROW_BLOCK)]
    parts = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_row_block)(spec, region, affinity, s, e) for s, e in blocks
    )
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    weights = np.concatenate([p[2] for p in parts])
    sampled = sum(p[3] for p in parts)
    conn = SparseConnectivity(mask.n, rows, cols, weights)
    log.info(
        "synthetic instance: %d voxels, %d planted regions, %d of %d sampled pairs stored",
        mask.n, spec.k_true, conn.nnz, sampled,
    )
    return SynthInstance(spec, mask, conn, truth, affinity, sampled)


def perturb_parcellation(parc, flip_fraction, seed=0):
    """Move exactly floor(flip_fraction * n) voxels to a uniformly drawn different label."""
    if not 0 <= flip_fraction <= 1:
        raise ValidationError("flip_fraction must lie in [0, 1]")
    count = int(math.floor(flip_fraction * parc.n))
    if count == 0:
        return parc
    if parc.k == 1:
        log.warning("single-region parcellation cannot be perturbed")
        return parc
    rng = as_generator(seed)
    idx = rng.choice(parc.n, size=count, replace=False)
    shift = rng.integers(1, parc.k, size=count)
    labels = parc.labels.copy()
    labels[idx] = (labels[idx] - 1 + shift) % parc.k + 1
    return Parcellation(labels, parc.k)


def random_parcellation(n, k, seed=0):
    """Uniform random labels with every label in [1, k] used at least once."""
    if not 1 <= k <= n:
        raise ValidationError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = as_generator(seed)
    labels = rng.integers(1, k + 1, size=n)
    labels[rng.permutation(n)[:k]] = np.arange(1, k + 1)
    return Parcellation(labels, k)


INSTANCE_FILES = {"mask": "mask.txt", "conn": "conn.txt", "truth": "truth.parc"}


def write_instance(instance, directory):
    os.makedirs(directory, exist_ok=True)
    paths = {key: os.path.join(directory, name) for key, name in INSTANCE_FILES.items()}
    write_mask(instance.mask, paths["mask"])
    write_connectivity(instance.conn, paths["conn"])
    write_parcellation(instance.truth, instance.mask, paths["truth"])
    return paths
