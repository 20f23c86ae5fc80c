"""Synthetic point cloud benchmark: four object categories with analytic masks.

Each category is a union of parametric surface patches with closed-form
areas.  Points are allocated to patches by largest-remainder rounding of the
area fractions and sampled uniformly on each patch, so mask populations track
region areas.  Per-point affordance masks follow fixed geometric rules
(e.g. a bottle's neck is graspable, its body side wrap-graspable, the top
opening containable); the "support" word stays all-zero everywhere and
exercises rejection.  A sample is fully determined by (category, seed,
n_points): the patch sampling, the random rigid rotation and the uniform
scale jitter in [0.8, 1.25] all come from one seeded generator, after which
the cloud is centered and scaled to the unit sphere.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointnet import normalize_cloud

CATEGORIES = ("bottle", "hat", "knife", "mug")
VOCAB_WORDS = ("contain", "cover", "cut", "grasp", "support", "wrap-grasp")
MIN_POINTS = 64
MANIFEST_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class PointCloudSample:
    """One cloud: float32 coords plus a {0,1} mask per affordance word."""

    coords: np.ndarray
    category: str
    affordances: list[tuple[str, np.ndarray]]
    sample_id: str = ""
    seed: int = 0

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {self.coords.shape}")
        n = self.coords.shape[0]
        names = [w for w, _ in self.affordances]
        if len(set(names)) != len(names):
            raise ValueError("duplicate affordance names in sample")
        checked = []
        for word, mask in self.affordances:
            mask = np.ascontiguousarray(mask, dtype=np.uint8)
            if mask.shape != (n,):
                raise ValueError(f"mask for {word!r} has shape {mask.shape}, expected ({n},)")
            if mask.max(initial=0) > 1:
                raise ValueError(f"mask for {word!r} contains non-binary values")
            checked.append((word, mask))
        self.affordances = checked

    @property
    def n_points(self) -> int:
        return int(self.coords.shape[0])

    def mask_for(self, word: str) -> np.ndarray | None:
        for w, m in self.affordances:
            if w == word:
                return m
        return None


# ---------------------------------------------------------------------------
# surface patch samplers (canonical pose; rotation/scale applied afterwards)
# ---------------------------------------------------------------------------

def _cylinder_side(rng, n, radius, z0, z1):
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    z = rng.uniform(z0, z1, n)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z])


def _disk(rng, n, r_outer, z, r_inner=0.0):
    r = np.sqrt(rng.uniform(r_inner ** 2, r_outer ** 2, n))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), np.full(n, float(z))])


def _hemisphere(rng, n, radius):
    # Uniform on the upper half sphere: z uniform in [0, R] (Archimedes).
    z = rng.uniform(0.0, radius, n)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    rho = np.sqrt(np.maximum(radius ** 2 - z * z, 0.0))
    return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])


def _torus_arc(rng, n, arc_center, arc_radius, tube_radius, phi_lo, phi_hi):
    """Tube of radius ``tube_radius`` around a circular arc in the x-z plane.

    Uniform-by-area sampling: phi is uniform along the arc and the tube angle
    psi is rejection-sampled with density proportional to
    (arc_radius + tube_radius * cos(psi)).
    """
    cx, cy, cz = arc_center
    pts = np.empty((n, 3))
    got = 0
    while got < n:
        m = 2 * (n - got) + 8
        phi = rng.uniform(phi_lo, phi_hi, m)
        psi = rng.uniform(0.0, 2.0 * np.pi, m)
        u = rng.uniform(0.0, 1.0, m)
        accept = u <= (arc_radius + tube_radius * np.cos(psi)) / (arc_radius + tube_radius)
        phi, psi = phi[accept], psi[accept]
        take = min(phi.size, n - got)
        phi, psi = phi[:take], psi[:take]
        ring_x = cx + (arc_radius + tube_radius * np.cos(psi)) * np.cos(phi)
        ring_z = cz + (arc_radius + tube_radius * np.cos(psi)) * np.sin(phi)
        ring_y = cy + tube_radius * np.sin(psi)
        pts[got:got + take] = np.column_stack([ring_x, ring_y, ring_z])
        got += take
    return pts


def _rect_face(origin, u, v):
    origin, u, v = (np.asarray(x, dtype=np.float64) for x in (origin, u, v))
    area = float(np.linalg.norm(np.cross(u, v)))

    def sampler(rng, n):
        a = rng.uniform(0.0, 1.0, n)
        b = rng.uniform(0.0, 1.0, n)
        return origin + a[:, None] * u + b[:, None] * v

    return area, sampler


def _box_faces(tag, x0, x1, y0, y1, z0, z1, skip=()):
    """The six axis-aligned faces of a box, minus the ones named in ``skip``."""
    dx, dy, dz = x1 - x0, y1 - y0, z1 - z0
    spec = {
        "-x": ((x0, y0, z0), (0, dy, 0), (0, 0, dz)),
        "+x": ((x1, y0, z0), (0, dy, 0), (0, 0, dz)),
        "-y": ((x0, y0, z0), (dx, 0, 0), (0, 0, dz)),
        "+y": ((x0, y1, z0), (dx, 0, 0), (0, 0, dz)),
        "-z": ((x0, y0, z0), (dx, 0, 0), (0, dy, 0)),
        "+z": ((x0, y0, z1), (dx, 0, 0), (0, dy, 0)),
    }
    patches = []
    for face, (origin, u, v) in spec.items():
        if face in skip:
            continue
        area, fn = _rect_face(origin, u, v)
        patches.append((f"{tag}{face}", area, fn))
    return patches


# Bottle: cylindrical body (r=0.3, z in [0, 0.7]) under a narrower neck
# (r=0.12, z in [0.7, 1.0]) closed by a bottom disk, a shoulder annulus and
# the top opening.
def _bottle_patches():
    return [
        ("body_side", 2 * np.pi * 0.3 * 0.7, lambda rng, n: _cylinder_side(rng, n, 0.3, 0.0, 0.7)),
        ("neck_side", 2 * np.pi * 0.12 * 0.3, lambda rng, n: _cylinder_side(rng, n, 0.12, 0.7, 1.0)),
        ("top_disk", np.pi * 0.12 ** 2, lambda rng, n: _disk(rng, n, 0.12, 1.0)),
        ("bottom_disk", np.pi * 0.3 ** 2, lambda rng, n: _disk(rng, n, 0.3, 0.0)),
        ("shoulder", np.pi * (0.3 ** 2 - 0.12 ** 2), lambda rng, n: _disk(rng, n, 0.3, 0.7, r_inner=0.12)),
    ]


# Mug: open cylinder (r=0.35, z in [0, 0.8]) with an inner top disk and a
# torus-arc handle hanging off the +x side.
_MUG_HANDLE = dict(arc_center=(0.35, 0.0, 0.40), arc_radius=0.22,
                   tube_radius=0.045, phi_lo=-1.7, phi_hi=1.7)


def _mug_patches():
    handle_area = ((_MUG_HANDLE["phi_hi"] - _MUG_HANDLE["phi_lo"])
                   * _MUG_HANDLE["arc_radius"] * 2 * np.pi * _MUG_HANDLE["tube_radius"])
    return [
        ("outer_wall", 2 * np.pi * 0.35 * 0.8, lambda rng, n: _cylinder_side(rng, n, 0.35, 0.0, 0.8)),
        ("inner_top", np.pi * 0.30 ** 2, lambda rng, n: _disk(rng, n, 0.30, 0.8)),
        ("rim", np.pi * (0.35 ** 2 - 0.30 ** 2), lambda rng, n: _disk(rng, n, 0.35, 0.8, r_inner=0.30)),
        ("bottom_disk", np.pi * 0.35 ** 2, lambda rng, n: _disk(rng, n, 0.35, 0.0)),
        ("handle", handle_area, lambda rng, n: _torus_arc(rng, n, **_MUG_HANDLE)),
    ]


# Knife: thin blade slab (x in [0, 0.6]) with its cutting edge along z=0,
# and a thicker handle slab behind it.  The two joining faces at x=0 are
# interior and not sampled.
def _knife_patches():
    blade = _box_faces("blade", 0.0, 0.6, -0.01, 0.01, 0.0, 0.18, skip=("-x",))
    handle = _box_faces("handle", -0.35, 0.0, -0.03, 0.03, 0.01, 0.17, skip=("+x",))
    return blade + handle


KNIFE_EDGE_BAND = 0.02  # "cut" covers blade points within this of the edge plane


# Hat: hemispherical crown (R=0.35) on a flat brim annulus (0.35 <= r <= 0.6).
def _hat_patches():
    return [
        ("crown", 2 * np.pi * 0.35 ** 2, lambda rng, n: _hemisphere(rng, n, 0.35)),
        ("brim", np.pi * (0.6 ** 2 - 0.35 ** 2), lambda rng, n: _disk(rng, n, 0.6, 0.0, r_inner=0.35)),
    ]


_PATCH_BUILDERS = {
    "bottle": _bottle_patches,
    "mug": _mug_patches,
    "knife": _knife_patches,
    "hat": _hat_patches,
}


def _category_masks(category: str, points: np.ndarray, patch: np.ndarray) -> dict[str, np.ndarray]:
    """Affordance masks in the canonical pose, keyed by word."""
    masks: dict[str, np.ndarray] = {}
    if category == "bottle":
        masks["grasp"] = patch == "neck_side"
        masks["wrap-grasp"] = patch == "body_side"
        masks["contain"] = patch == "top_disk"
    elif category == "mug":
        masks["grasp"] = patch == "handle"
        masks["wrap-grasp"] = patch == "outer_wall"
        masks["contain"] = patch == "inner_top"
    elif category == "knife":
        is_handle = np.char.startswith(patch.astype(str), "handle")
        is_blade = np.char.startswith(patch.astype(str), "blade")
        masks["grasp"] = is_handle
        masks["cut"] = is_blade & (points[:, 2] <= KNIFE_EDGE_BAND)
    elif category == "hat":
        masks["cover"] = patch == "crown"
        masks["grasp"] = patch == "brim"
    return masks


def _allocate_counts(n: int, areas: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of area-proportional point counts."""
    raw = areas / areas.sum() * n
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def generate_sample(category: str, seed: int, n_points: int = 512) -> PointCloudSample:
    """Sample one object; fully determined by (category, seed, n_points)."""
    if category not in _PATCH_BUILDERS:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    if n_points < MIN_POINTS:
        raise ValueError(f"n_points must be >= {MIN_POINTS}, got {n_points}")
    rng = np.random.default_rng(seed)
    patches = _PATCH_BUILDERS[category]()
    areas = np.array([area for _, area, _ in patches], dtype=np.float64)
    counts = _allocate_counts(n_points, areas)
    chunks, names = [], []
    for (name, _, sampler), count in zip(patches, counts):
        if count == 0:
            continue
        chunks.append(sampler(rng, int(count)))
        names.extend([name] * int(count))
    points = np.concatenate(chunks, axis=0)
    patch = np.array(names)
    raw_masks = _category_masks(category, points, patch)

    rotation = _random_rotation(rng)
    scale = rng.uniform(0.8, 1.25)
    placed = (points @ rotation.T) * scale
    coords = normalize_cloud(placed).astype(np.float32)

    affordances = []
    for word in VOCAB_WORDS:
        mask = raw_masks.get(word)
        mask = np.zeros(n_points, dtype=np.uint8) if mask is None else mask.astype(np.uint8)
        affordances.append((word, mask))
    return PointCloudSample(coords=coords, category=category, affordances=affordances,
                            sample_id=f"{category}-{seed}", seed=seed)


def partial_view(sample: PointCloudSample, view_seed: int) -> PointCloudSample:
    """Half-space occlusion surrogate for a single-viewpoint scan.

    A seed-determined unit direction ``v`` keeps the points whose projection
    onto ``v`` (about the centroid) exceeds the 30th percentile — roughly 70%
    of the cloud.  All survivors are kept and the cloud is padded back to N
    by drawing survivors with replacement (duplicates carry duplicated mask
    bits), then re-normalized.
    """
    coords = sample.coords.astype(np.float64)
    n = coords.shape[0]
    rng = np.random.default_rng(view_seed)
    v = rng.normal(size=3)
    while np.linalg.norm(v) < 1e-12:  # pragma: no cover - vanishing probability
        v = rng.normal(size=3)
    v = v / np.linalg.norm(v)
    proj = (coords - coords.mean(axis=0)) @ v
    threshold = np.sort(proj)[int(np.floor(0.3 * n))]
    keep = np.flatnonzero(proj > threshold)
    if keep.size < 8:
        raise ValueError(f"partial view keeps only {keep.size} points (need >= 8)")
    extra = rng.integers(0, keep.size, size=n - keep.size)
    idx = np.concatenate([keep, keep[extra]])
    new_coords = normalize_cloud(coords[idx]).astype(np.float32)
    affordances = [(word, mask[idx].copy()) for word, mask in sample.affordances]
    return PointCloudSample(coords=new_coords, category=sample.category,
                            affordances=affordances,
                            sample_id=f"{sample.sample_id}-view{view_seed}",
                            seed=view_seed)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def stable_hash(text: str) -> int:
    """Platform- and run-stable 32-bit hash (CRC32)."""
    return zlib.crc32(text.encode("utf-8"))


def sample_seed(global_seed: int, category: str, index: int) -> int:
    return int(global_seed) + stable_hash(f"{category}:{index}")


def view_seed_for(name: str) -> int:
    """Deterministic per-sample viewpoint seed for partial-view evaluation."""
    return stable_hash(f"{name}:view")


@dataclass
class DatasetManifest:
    affordances: list[str]
    samples: list[str]
    splits: dict[str, list[int]]
    generator: dict = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {"format_version": self.format_version,
                "affordances": list(self.affordances),
                "samples": list(self.samples),
                "splits": {k: list(v) for k, v in self.splits.items()},
                "generator": dict(self.generator)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(affordances=list(d["affordances"]), samples=list(d["samples"]),
                   splits={k: list(v) for k, v in d["splits"].items()},
                   generator=dict(d.get("generator", {})),
                   format_version=int(d["format_version"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_manifest(out_dir, per_category: int, n_points: int = 512,
                   seed: int = 0) -> DatasetManifest:
    """Generate the full corpus plus a 70/10/20 per-category split."""
    if per_category < 10:
        raise ValueError(f"per-category sample count minimum is 10, got {per_category}")
    from .afpc import write_sample  # local import to avoid a cycle

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples: list[str] = []
    splits: dict[str, list[int]] = {name: [] for name in SPLIT_NAMES}
    for category in CATEGORIES:
        base = len(samples)
        for i in range(per_category):
            s = generate_sample(category, sample_seed(seed, category, i), n_points)
            fname = f"{category}_{i:04d}.afpc"
            write_sample(s, out / fname)
            samples.append(fname)
        n_train = int(round(0.7 * per_category))
        n_val = int(round(0.1 * per_category))
        splits["train"].extend(range(base, base + n_train))
        splits["val"].extend(range(base + n_train, base + n_train + n_val))
        splits["test"].extend(range(base + n_train + n_val, base + per_category))
    manifest = DatasetManifest(affordances=list(VOCAB_WORDS), samples=samples,
                               splits=splits,
                               generator={"n_points": n_points,
                                          "per_category": per_category,
                                          "seed": seed})
    manifest.save(out / "manifest.json")
    return manifest


def load_split_samples(manifest: DatasetManifest, manifest_dir, split: str):
    """Read every sample of one split, in index order."""
    from .afpc import read_sample

    if split not in manifest.splits:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(manifest.splits)}")
    base = Path(manifest_dir)
    return [read_sample(base / manifest.samples[i]) for i in manifest.splits[split]]
