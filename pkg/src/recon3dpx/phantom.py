"""Procedural jaw phantoms, curved planar reformation, PX synthesis,
rotation augmentation and on-disk dataset assembly."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import container

log = logging.getLogger(__name__)

AIR, SOFT, BONE, TOOTH = 0, 1, 2, 3
_SNAP = 1e-9  # sample coordinates this close to a voxel centre are snapped onto it


@dataclass
class Volume3D:
    """Density volume indexed ``data[x, y, z]``; z is the vertical axis."""

    data: np.ndarray
    voxel_size: float = 1.0
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.data = np.clip(np.asarray(self.data, dtype=np.float32), 0.0, 1.0)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape


class ArchCurve:
    """Planar curve (x(t), y(t)) at height ``z_ref``, all in millimetres.

    Stored as a dense polyline with a cumulative arc-length table; positions
    and tangents at an arc length are linear interpolations along it.
    """

    def __init__(self, points, z_ref: float):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("ArchCurve needs an (N>=2, 2) array of points")
        seg = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seg <= 0):
            raise ValueError("degenerate arch curve: repeated points give zero-length segments")
        self.points = pts
        self.z_ref = float(z_ref)
        self.arc_length_table = np.concatenate([[0.0], np.cumsum(seg)])
        tangents = np.gradient(pts, axis=0)
        self._tangents = tangents / np.hypot(*tangents.T)[:, None]

    @property
    def length(self) -> float:
        return float(self.arc_length_table[-1])

    @classmethod
    def parabola(cls, center_x: float, front_y: float, half_width: float, arch_depth: float, z_ref: float, n: int = 1025):
        t = np.linspace(0.0, 1.0, n)
        u = 2 * t - 1
        return cls(np.stack([center_x + half_width * u, front_y - arch_depth * u * u], axis=1), z_ref)

    @classmethod
    def line(cls, start, end, z_ref: float):
        return cls(np.array([start, end], dtype=np.float64), z_ref)

    @classmethod
    def circle_arc(cls, center, radius: float, theta0: float, theta1: float, z_ref: float, n: int = 4097):
        th = np.linspace(theta0, theta1, n)
        return cls(np.stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)], axis=1), z_ref)

    def at(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Positions and unit normals at arc lengths ``s``.

        The normal is the tangent rotated +90 degrees: (-ty, tx).
        """
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        table = self.arc_length_table
        k = np.clip(np.searchsorted(table, s, side="right") - 1, 0, len(table) - 2)
        frac = (s - table[k]) / (table[k + 1] - table[k])
        pos = self.points[k] + frac[:, None] * (self.points[k + 1] - self.points[k])
        tan = self._tangents[k] + frac[:, None] * (self._tangents[k + 1] - self._tangents[k])
        tan /= np.hypot(*tan.T)[:, None]
        normal = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
        return pos, normal

    def stations(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """``count`` arc-length-uniform stations, first and last at the curve ends."""
        return self.at(np.linspace(0.0, self.length, count))


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int] = (96, 80, 80)
    voxel_size: float = 1.25
    smooth_sigma: float = 1.0  # voxels
    teeth_range: tuple[int, int] = (10, 16)


@dataclass(frozen=True)
class ReformatSpec:
    depth_range_mm: float = 40.0
    depth_step_mm: float = 0.2
    height_mm: float = 100.0
    out_dims: tuple[int, int, int] = (16, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "out_dims", tuple(int(v) for v in self.out_dims))
        if min(self.depth_range_mm, self.depth_step_mm, self.height_mm) <= 0 or min(self.out_dims) <= 0:
            raise ValueError("reformat spec values must be positive")

    @property
    def depth_samples(self) -> int:
        return int(round(self.depth_range_mm / self.depth_step_mm))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear lookup at voxel-index coordinates ``coords[..., 3]``.

    Corners outside the volume read 0. A coordinate on a voxel centre
    returns that voxel's value exactly.
    """
    c = np.asarray(coords, dtype=np.float64)
    near = np.rint(c)
    c = np.where(np.abs(c - near) < _SNAP, near, c)
    base = np.floor(c).astype(np.int64)
    frac = c - base
    shape = np.array(data.shape)
    out = np.zeros(c.shape[:-1], dtype=np.float64)
    for corner in np.ndindex(2, 2, 2):
        idx = base + np.array(corner)
        weight = np.ones(c.shape[:-1])
        for ax in range(3):
            weight = weight * (frac[..., ax] if corner[ax] else 1.0 - frac[..., ax])
        inside = np.all((idx >= 0) & (idx < shape), axis=-1)
        idx = np.clip(idx, 0, shape - 1)
        vals = data[idx[..., 0], idx[..., 1], idx[..., 2]]
        out += weight * np.where(inside, vals, 0.0)
    return out


def _resample_axis0(arr: np.ndarray, n_out: int) -> np.ndarray:
    n_in = arr.shape[0]
    if n_in == n_out:
        return arr
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    f = (src - lo).reshape((-1,) + (1,) * (arr.ndim - 1))
    return arr[lo] * (1.0 - f) + arr[hi] * f


def curved_planar_reformat(vol: Volume3D, curve: ArchCurve, spec: ReformatSpec) -> np.ndarray:
    """Flatten ``vol`` along ``curve`` into a ``[D, H, W]`` float32 array.

    Width runs along the curve, height downwards from the top of the slab,
    depth along the in-plane normal from -range/2 to +range/2.
    """
    if curve.length <= 0:
        raise ValueError("degenerate arch curve (zero length)")
    d, h, w = spec.out_dims
    n = spec.depth_samples
    pos, normal = curve.stations(w)
    half = spec.depth_range_mm / 2
    vs = vol.voxel_size
    extent_mm = (np.array(vol.extents[:2]) - 0.5) * vs
    for end in (pos + half * normal, pos - half * normal, pos):
        if np.any(end < -0.5 * vs - 1e-9) or np.any(end > extent_mm + 1e-9):
            raise ValueError("arch curve (with depth margin) leaves the volume")
    u = -half + (np.arange(n) + 0.5) * spec.depth_step_mm
    z = curve.z_ref + spec.height_mm / 2 - (np.arange(h) + 0.5) * spec.height_mm / h
    coords = np.empty((n, h, w, 3))
    coords[..., 0] = (pos[None, None, :, 0] + u[:, None, None] * normal[None, None, :, 0]) / vs
    coords[..., 1] = (pos[None, None, :, 1] + u[:, None, None] * normal[None, None, :, 1]) / vs
    coords[..., 2] = z[None, :, None] / vs
    planes = sample_trilinear(vol.data, coords)
    return _resample_axis0(planes, d).astype(np.float32)


def px_project(flattened: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Depth-mean projection ``[D,H,W] -> [1,H,W]``, min-max scaled to [0,1]."""
    flat = np.asarray(flattened)
    img = flat.mean(axis=0, dtype=flat.dtype)[None]
    if not normalize:
        return img
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def rotation_matrix(vertical_deg: float, lateral_deg: float) -> np.ndarray:
    """Head nod about the left-right (x) axis, then head turn about z."""
    a, b = math.radians(vertical_deg), math.radians(lateral_deg)
    rx = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    rz = np.array([[math.cos(b), -math.sin(b), 0], [math.sin(b), math.cos(b), 0], [0, 0, 1]])
    return rz @ rx


def rotate_volume(vol: Volume3D, vertical_deg: float, lateral_deg: float) -> Volume3D:
    """Rigid rotation about the volume centre with trilinear resampling."""
    if abs(vertical_deg) > 15 or abs(lateral_deg) > 15:
        raise ValueError("rotation angles are limited to +/-15 degrees")
    if vertical_deg == 0 and lateral_deg == 0:
        return Volume3D(vol.data.copy(), vol.voxel_size, None if vol.labels is None else vol.labels.copy())
    rot = rotation_matrix(vertical_deg, lateral_deg)
    center = (np.array(vol.extents) - 1) / 2.0
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in vol.extents], indexing="ij"), axis=-1)
    # inverse map: source = R^T (p - c) + c, written for row vectors
    src = (grid - center) @ rot + center
    return Volume3D(sample_trilinear(vol.data, src), vol.voxel_size)


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------


def generate_phantom(seed: int, spec: PhantomSpec = PhantomSpec()) -> tuple[Volume3D, ArchCurve]:
    """Jaw-like phantom: soft tissue, two bone slabs along an arch, teeth."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = spec.extents
    vs = spec.voxel_size
    size = np.array(spec.extents) * vs
    cx, zc = size[0] / 2, size[2] / 2
    half_width = size[0] * rng.uniform(0.25, 0.29)
    arch_depth = size[1] * rng.uniform(0.36, 0.44)
    front_y = size[1] * 0.72
    curve = ArchCurve.parabola(cx, front_y, half_width, arch_depth, zc)

    xs, ys, zs = (np.arange(n) * vs for n in spec.extents)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    data = np.zeros(spec.extents, dtype=np.float64)
    labels = np.zeros(spec.extents, dtype=np.uint8)

    # in-plane distance from every (x, y) column to the arch
    pts = curve.points[::8]
    d2 = (X[:, :, 0, None] - pts[:, 0]) ** 2 + (Y[:, :, 0, None] - pts[:, 1]) ** 2
    dist = np.sqrt(d2.min(axis=-1))[:, :, None]

    # soft tissue hugs the arch; the rest of the field of view stays air
    soft = (dist < rng.uniform(9.0, 11.0)) & (np.abs(Z - zc) < rng.uniform(28.0, 32.0))
    data[soft] = rng.uniform(0.1, 0.25)
    labels[soft] = SOFT

    bone_density = rng.uniform(0.45, 0.6)
    lower = (dist < rng.uniform(4.0, 5.0)) & (Z > zc - rng.uniform(24, 28)) & (Z < zc - 6)
    upper = (dist < rng.uniform(3.5, 4.5)) & (Z > zc + 6) & (Z < zc + rng.uniform(18, 22))
    bone = lower | upper
    data[bone] = bone_density
    labels[bone] = BONE

    n_teeth = int(rng.integers(spec.teeth_range[0], spec.teeth_range[1] + 1))
    rows = [(+1, n_teeth // 2), (-1, n_teeth - n_teeth // 2)]
    for sign, count in rows:
        s = np.linspace(0.08, 0.92, count) * curve.length + rng.uniform(-1.5, 1.5, count)
        centers, normals = curve.at(s)
        for k in range(count):
            n_off = rng.uniform(-1.5, 1.5)
            c = np.array([*(centers[k] + n_off * normals[k]), zc + sign * rng.uniform(8.0, 10.0)])
            axes = np.array([rng.uniform(2.8, 3.8), rng.uniform(3.5, 4.8), rng.uniform(7.0, 10.0)])
            tilt = math.radians(rng.uniform(-10, 10))
            tangent = np.array([normals[k][1], -normals[k][0], 0.0])
            normal3 = np.array([normals[k][0], normals[k][1], 0.0])
            up = np.array([0.0, 0.0, 1.0])
            # tilt in the (normal, vertical) plane
            e_n = math.cos(tilt) * normal3 + math.sin(tilt) * up
            e_z = -math.sin(tilt) * normal3 + math.cos(tilt) * up
            r = axes.max()
            lo = np.maximum(((c - r) / vs).astype(int), 0)
            hi = np.minimum(((c + r) / vs).astype(int) + 2, spec.extents)
            box = tuple(slice(a, b) for a, b in zip(lo, hi))
            rel = np.stack([X[box] - c[0], Y[box] - c[1], Z[box] - c[2]], axis=-1)
            q = (rel @ tangent / axes[0]) ** 2 + (rel @ e_n / axes[1]) ** 2 + (rel @ e_z / axes[2]) ** 2
            inside = q <= 1.0
            data[box][inside] = rng.uniform(0.7, 1.0)
            labels[box][inside] = TOOTH

    if spec.smooth_sigma > 0:
        data = ndimage.gaussian_filter(data, spec.smooth_sigma, mode="constant")
    return Volume3D(data, vs, labels), curve


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

DEFAULT_ANGLE_CLASSES = ((0.0, -10.0), (0.0, -5.0), (0.0, 0.0), (0.0, 5.0), (0.0, 10.0))
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetSpec:
    n_subjects: int = 10
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    reformat: ReformatSpec = field(default_factory=ReformatSpec)
    angle_classes: tuple = DEFAULT_ANGLE_CLASSES
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three values summing to 1, got {self.split_fractions}")
        if any(f < 0 for f in self.split_fractions):
            raise ValueError("split fractions must be non-negative")
        object.__setattr__(self, "angle_classes", tuple(tuple(float(a) for a in c) for c in self.angle_classes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angle_classes"] = [list(c) for c in self.angle_classes]
        d["split_fractions"] = list(self.split_fractions)
        d["phantom"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["phantom"].items()}
        d["reformat"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["reformat"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["phantom"] = PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("phantom", {}).items()})
        d["reformat"] = ReformatSpec(**d.get("reformat", {}))
        if "angle_classes" in d:
            d["angle_classes"] = tuple(tuple(c) for c in d["angle_classes"])
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


@dataclass
class SamplePair:
    px: np.ndarray
    flattened: np.ndarray
    misalignment_class: int
    rotation: tuple[float, float]
    sample_id: str


def split_counts(n: int, fractions) -> list[int]:
    """Floor every split except the last, which takes the remainder."""
    counts = [int(math.floor(f * n + 1e-9)) for f in fractions[:-1]]
    return counts + [n - sum(counts)]


def subject_seed(seed: int, subject: int) -> int:
    return int(np.random.SeedSequence([seed, subject]).generate_state(1)[0])


def make_sample(subject: int, cls_index: int, spec: DatasetSpec, phantom=None) -> SamplePair:
    vol, curve = phantom or generate_phantom(subject_seed(spec.seed, subject), spec.phantom)
    vertical, lateral = spec.angle_classes[cls_index]
    rotated = rotate_volume(vol, vertical, lateral)
    flattened = curved_planar_reformat(rotated, curve, spec.reformat)
    return SamplePair(
        px=px_project(flattened),
        flattened=flattened,
        misalignment_class=cls_index,
        rotation=(vertical, lateral),
        sample_id=f"s{subject:04d}_c{cls_index}",
    )


def build_dataset(out_dir: str | os.PathLike, spec: DatasetSpec, force: bool = False) -> dict:
    """Write manifest.json and one PXT1 file per sample; returns the manifest.

    Output is assembled in a sibling temp directory and renamed into place,
    so a failure leaves nothing behind.
    """
    out = Path(out_dir)
    if out.exists() and not force:
        raise FileExistsError(f"{out} exists (use force to overwrite)")
    tmp = out.with_name(out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    try:
        (tmp / "samples").mkdir(parents=True)
        order = np.random.default_rng([spec.seed, 1]).permutation(spec.n_subjects)
        counts = split_counts(spec.n_subjects, spec.split_fractions)
        subjects, start = {}, 0
        for name, count in zip(SPLITS, counts):
            subjects[name] = sorted(int(s) for s in order[start : start + count])
            start += count
        samples, splits = [], {name: [] for name in SPLITS}
        split_of = {s: name for name, subs in subjects.items() for s in subs}
        for subject in range(spec.n_subjects):
            phantom = generate_phantom(subject_seed(spec.seed, subject), spec.phantom)
            for cls_index in range(len(spec.angle_classes)):
                pair = make_sample(subject, cls_index, spec, phantom)
                rel = f"samples/{pair.sample_id}.pxt"
                container.write(tmp / rel, {"px": pair.px, "flattened": pair.flattened})
                samples.append(
                    {
                        "sample_id": pair.sample_id,
                        "subject": subject,
                        "misalignment_class": cls_index,
                        "rotation": list(pair.rotation),
                        "file": rel,
                        "split": split_of[subject],
                    }
                )
                splits[split_of[subject]].append(pair.sample_id)
        manifest = {
            "format": "recon3dpx-dataset",
            "version": 1,
            "spec": spec.to_dict(),
            "seed": spec.seed,
            "subjects": subjects,
            "splits": splits,
            "samples": samples,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("dataset written to %s: %s", out, {k: len(v) for k, v in splits.items()})
    return manifest


class Dataset:
    """Read-only view of a directory written by :func:`build_dataset`."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        self.spec = DatasetSpec.from_dict(self.manifest["spec"])
        self._by_id = {s["sample_id"]: s for s in self.manifest["samples"]}

    def ids(self, split: str) -> list[str]:
        if split not in self.manifest["splits"]:
            raise KeyError(f"unknown split {split!r}")
        return list(self.manifest["splits"][split])

    def load(self, sample_id: str) -> SamplePair:
        meta = self._by_id[sample_id]
        arrays = container.read(self.root / meta["file"])
        return SamplePair(
            px=arrays["px"],
            flattened=arrays["flattened"],
            misalignment_class=meta["misalignment_class"],
            rotation=tuple(meta["rotation"]),
            sample_id=sample_id,
        )

    def split(self, name: str) -> list[SamplePair]:
        return [self.load(i) for i in self.ids(name)]
