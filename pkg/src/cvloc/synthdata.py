"""Procedural synthetic data: a continuous top-down world, heading-aligned
patch cropping, ray-cast ground views, and positive / semi-positive pair
sampling, plus the on-disk dataset format.

Conventions: images are (3, rows, cols) float32 in [0, 1]. A continuous
position is (u, v) = (row, col) in pixel units; the center of pixel [i, j]
is (i + 0.5, j + 0.5). Headings are radians, 0 pointing "up" (decreasing
row), positive clockwise.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import checkpoint
from .errors import ConfigError, DataError

DEFAULT_METERS_PER_PX = 0.114


@dataclass
class WorldMap:
    size_px: int
    meters_per_px: float
    rgb: np.ndarray  # (3, size, size)
    seed: int


@dataclass
class CameraPose:
    u: float
    v: float
    heading: float


@dataclass
class Sample:
    ground: Optional[np.ndarray]  # (3, ground_h, ground_w)
    satellite: Optional[np.ndarray]  # (3, L, L)
    gt_pixel: tuple  # continuous (u, v) inside the patch
    heading: float
    meters_per_px: float
    kind: str  # "positive" | "semi-positive"


def heading_vec(theta: float):
    """Unit (du, dv) of a heading."""
    return (-math.cos(theta), math.sin(theta))


def _rot(theta: float):
    c, s = math.cos(theta), math.sin(theta)
    # Columns: where patch-down and patch-right land in the world.
    return np.array([[c, s], [-s, c]], dtype=np.float64)


def patch_to_world(pt, center, heading: float, L: int):
    offset = np.asarray(pt, dtype=np.float64) - L / 2.0
    return tuple(np.asarray(center, dtype=np.float64) + _rot(heading) @ offset)


def world_to_patch(pt, center, heading: float, L: int):
    offset = np.asarray(pt, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return tuple(L / 2.0 + _rot(heading).T @ offset)


def bilinear_sample(img: np.ndarray, us, vs) -> np.ndarray:
    """Sample (3, H, W) at continuous (u, v) positions, interpolating between
    pixel centers and clamping at the border. Returns (3, ...) colors."""
    h, w = img.shape[1], img.shape[2]
    us = np.asarray(us, dtype=np.float64) - 0.5
    vs = np.asarray(vs, dtype=np.float64) - 0.5
    u0 = np.clip(np.floor(us).astype(np.int64), 0, h - 1)
    v0 = np.clip(np.floor(vs).astype(np.int64), 0, w - 1)
    u1 = np.minimum(u0 + 1, h - 1)
    v1 = np.minimum(v0 + 1, w - 1)
    fu = np.clip(us - u0, 0.0, 1.0)
    fv = np.clip(vs - v0, 0.0, 1.0)
    c00 = img[:, u0, v0]
    c01 = img[:, u0, v1]
    c10 = img[:, u1, v0]
    c11 = img[:, u1, v1]
    top = c00 * (1 - fv) + c01 * fv
    bot = c10 * (1 - fv) + c11 * fv
    return (top * (1 - fu) + bot * fu).astype(np.float32)


# -- world generation ---------------------------------------------------------


def _coarse_noise(rng, size: int, cell: int, amp: float) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [-amp, amp], one channel."""
    n = size // cell + 2
    grid = rng.uniform(-amp, amp, size=(n, n))
    ys = np.arange(size) / cell
    y0 = ys.astype(np.int64)
    fy = ys - y0
    rows = grid[y0] * (1 - fy)[:, None] + grid[y0 + 1] * fy[:, None]
    cols0 = rows[:, y0] * (1 - fy)[None, :]
    cols1 = rows[:, y0 + 1] * fy[None, :]
    return cols0 + cols1


def gen_world(seed: int, size_px: int, meters_per_px: float = DEFAULT_METERS_PER_PX) -> WorldMap:
    """Deterministic procedural overhead map: vegetation base, colored
    building rectangles, gray road strips drawn on top.

    Roads are the only gray (r == g == b) content, so coverage is measurable
    on the rendered image; generator constants keep the road fraction inside
    [0.1, 0.5].
    """
    if size_px < 4 * 64:
        raise ConfigError(f"world size {size_px} too small; need at least {4 * 64}")
    rng = np.random.default_rng([int(seed), 0xC0FFEE])

    base = np.array([0.22, 0.45, 0.24], dtype=np.float64)
    rgb = np.empty((3, size_px, size_px), dtype=np.float64)
    # Vegetation rides on large-scale structure so distant regions look
    # distinct: a shared brightness field, and slow cross-world ramps in the
    # red/blue channels (soil/moisture drift) that effectively color-code
    # position. Channel gaps stay wide enough that vegetation never reads as
    # road-gray (the g channel leads r and b by >= 0.2 before noise).
    brightness = _coarse_noise(rng, size_px, 48, 0.05)
    axis = np.linspace(-1.0, 1.0, size_px)
    sign_u, sign_v = rng.choice([-1.0, 1.0], size=2)
    ramp_u = 0.16 * sign_u * axis[:, None] + 0.0 * axis[None, :]
    ramp_v = 0.16 * sign_v * axis[None, :] + 0.0 * axis[:, None]
    ramps = {0: ramp_v, 1: 0.0, 2: ramp_u}
    for ch in range(3):
        rgb[ch] = (
            base[ch]
            + brightness
            + ramps[ch]
            + _coarse_noise(rng, size_px, 80, 0.02)
            + _coarse_noise(rng, size_px, 16, 0.03)
        )
    fine = rng.uniform(-0.02, 0.02, size=(3, size_px, size_px))
    rgb += fine

    # Buildings: saturated rectangles, one dominant channel each.
    n_buildings = max(12, size_px * size_px // 3500)
    for _ in range(n_buildings):
        bh = int(rng.integers(8, 30))
        bw = int(rng.integers(8, 30))
        u0 = int(rng.integers(0, size_px - bh))
        v0 = int(rng.integers(0, size_px - bw))
        dom = int(rng.integers(0, 3))
        # Saturated distinctive palettes, drifted by the regional ramps so
        # built-up regions stay consistent with their surroundings.
        color = rng.uniform(0.12, 0.45, size=3)
        color[dom] = rng.uniform(0.55, 0.95)
        color[0] += ramp_v[u0, v0]
        color[2] += ramp_u[u0, v0]
        shade = rng.uniform(-0.02, 0.02, size=(bh, bw))
        for ch in range(3):
            rgb[ch, u0 : u0 + bh, v0 : v0 + bw] = color[ch] + shade

    # Roads: gray strips, identical across channels.
    vv, uu = np.meshgrid(np.arange(size_px), np.arange(size_px))
    # Road gray drifts with the regional ramps (asphalt shade varies across
    # the map) but stays exactly channel-equal.
    road_shade = 0.45 + 0.3 * (ramp_u + ramp_v)
    n_axis = max(3, size_px // 96)
    for axis in (0, 1):
        for _ in range(n_axis):
            pos = int(rng.integers(0, size_px))
            width = int(rng.integers(5, 9))
            tone = rng.uniform(-0.03, 0.03)
            tex = rng.uniform(-0.015, 0.015, size=size_px)
            lo, hi = max(0, pos - width // 2), min(size_px, pos + (width + 1) // 2)
            if axis == 0:
                rgb[:, lo:hi, :] = road_shade[None, lo:hi, :] + tone + tex[None, None, :]
            else:
                rgb[:, :, lo:hi] = road_shade[None, :, lo:hi] + tone + tex[None, :, None]
    for _ in range(max(2, size_px // 256)):
        offs = int(rng.integers(-size_px // 2, size_px // 2))
        width = int(rng.integers(5, 9))
        tone = rng.uniform(-0.03, 0.03)
        sign = 1 if rng.integers(0, 2) else -1
        band = np.abs(uu + sign * vv - (size_px // 2 + offs)) < width
        rgb[:, band] = road_shade[band][None, :] + tone

    rgb = np.clip(rgb, 0.0, 1.0)
    return WorldMap(
        size_px=size_px,
        meters_per_px=meters_per_px,
        rgb=rgb.astype(np.float32),
        seed=int(seed),
    )


# -- views ---------------------------------------------------------------------


def crop_rotated_patch(world: WorldMap, pose: CameraPose, L: int, center=None) -> np.ndarray:
    """L x L patch whose "up" direction is the pose heading.

    The patch grid is rotated by the heading about the patch center (the pose
    position unless `center` overrides it) and bilinearly sampled from the
    world; every sample must stay inside the world.
    """
    if center is None:
        center = (pose.u, pose.v)
    cu, cv = float(center[0]), float(center[1])
    idx = np.arange(L, dtype=np.float64) + 0.5 - L / 2.0
    du, dv = np.meshgrid(idx, idx, indexing="ij")
    rot = _rot(pose.heading)
    us = cu + rot[0, 0] * du + rot[0, 1] * dv
    vs = cv + rot[1, 0] * du + rot[1, 1] * dv
    size = world.size_px
    if us.min() < 0 or vs.min() < 0 or us.max() > size or vs.max() > size:
        raise DataError(
            f"patch at ({cu:.1f}, {cv:.1f}) heading {pose.heading:.2f} leaves the world"
        )
    return bilinear_sample(world.rgb, us, vs)


def render_ground(
    world: WorldMap,
    pose: CameraPose,
    ground_h: int,
    ground_w: int,
    max_range_px: float,
    view: str = "panorama",
) -> np.ndarray:
    """Ray-cast ground view: column c looks along azimuth heading + offset(c),
    row r samples the world color at range (r+1)/ground_h * max_range_px.

    "panorama" spreads columns over the full circle; "front" covers a 90-degree
    field of view centered on the heading.
    """
    cols = np.arange(ground_w, dtype=np.float64)
    if view == "panorama":
        az = pose.heading + 2.0 * math.pi * cols / ground_w
    elif view == "front":
        az = pose.heading + (cols / (ground_w - 1) - 0.5) * (math.pi / 2.0)
    else:
        raise ConfigError(f"unknown ground view mode {view!r}")
    ranges = (np.arange(ground_h, dtype=np.float64) + 1.0) / ground_h * max_range_px
    us = pose.u + ranges[:, None] * (-np.cos(az))[None, :]
    vs = pose.v + ranges[:, None] * (np.sin(az))[None, :]
    size = world.size_px
    if us.min() < 0 or vs.min() < 0 or us.max() > size or vs.max() > size:
        raise DataError(f"ground rays at ({pose.u:.1f}, {pose.v:.1f}) leave the world")
    return bilinear_sample(world.rgb, us, vs)


def rotate_patch(patch: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a square patch about its center by `angle` (clockwise positive),
    bilinear with clamp-to-edge for corners that leave the source."""
    L = patch.shape[1]
    idx = np.arange(L, dtype=np.float64) + 0.5 - L / 2.0
    du, dv = np.meshgrid(idx, idx, indexing="ij")
    rot = _rot(angle)
    us = L / 2.0 + rot[0, 0] * du + rot[0, 1] * dv
    vs = L / 2.0 + rot[1, 0] * du + rot[1, 1] * dv
    return bilinear_sample(patch, us, vs)


def shift_panorama(ground: np.ndarray, cols: int) -> np.ndarray:
    """Rotate the panorama heading by `cols` columns (positive = clockwise)."""
    return np.roll(ground, -cols, axis=2)


def sampling_margin(L: int, max_range_px: float) -> float:
    """Distance from the border all poses must keep: the farthest patch center
    (semi-positive shift included) plus the rotated patch's corner radius."""
    patch_reach = math.sqrt(2.0) * L / 4.0 + L / 2.0 + L / math.sqrt(2.0)
    return max(patch_reach, max_range_px) + 2.0


def sample_pair(world: WorldMap, rng, kind: str, config) -> Sample:
    """Draw one training/eval unit.

    Positive patches place the ground truth uniformly inside the central
    L/2 x L/2 square; semi-positive patches shift the patch center by L/2
    along one patch axis, which moves the ground truth into the outer band
    while keeping it inside the patch.
    """
    L = config.L
    margin = sampling_margin(L, config.max_range_px)
    lo, hi = margin, world.size_px - margin
    if hi <= lo:
        raise ConfigError(f"world size {world.size_px} too small for patch size {L}")
    # "fixed" mirrors north-aligned panorama datasets (every pair shares one
    # reference direction); "random" mirrors view-aligned front-camera data.
    heading = 0.0 if config.heading_mode == "fixed" else float(
        rng.uniform(0.0, 2.0 * math.pi)
    )
    pose = CameraPose(
        u=float(rng.uniform(lo, hi)),
        v=float(rng.uniform(lo, hi)),
        heading=heading,
    )
    gt = np.array(
        [rng.uniform(L / 4.0, 3.0 * L / 4.0), rng.uniform(L / 4.0, 3.0 * L / 4.0)]
    )
    if kind == "semi-positive":
        axis = int(rng.integers(0, 2))
        gt[axis] += L / 2.0 if gt[axis] < L / 2.0 else -L / 2.0
    elif kind != "positive":
        raise ConfigError(f"unknown sample kind {kind!r}")
    # Solve for the patch center that puts the pose at gt in patch coordinates.
    center = np.asarray((pose.u, pose.v)) - _rot(pose.heading) @ (gt - L / 2.0)
    satellite = crop_rotated_patch(world, pose, L, center=tuple(center))
    ground = render_ground(
        world, pose, config.ground_h, config.ground_w, config.max_range_px, config.view
    )
    return Sample(
        ground=ground,
        satellite=satellite,
        gt_pixel=(float(gt[0]), float(gt[1])),
        heading=pose.heading,
        meters_per_px=world.meters_per_px,
        kind=kind,
    )


@dataclass
class SamplerConfig:
    L: int = 64
    ground_h: int = 16
    ground_w: int = 64
    max_range_px: float = 32.0
    view: str = "panorama"
    heading_mode: str = "fixed"  # fixed | random


# -- dataset I/O -----------------------------------------------------------------

INDEX_NAME = "index.csv"


def write_dataset(samples, path) -> None:
    """Write samples to a directory: an index line per sample plus one CVML
    tensor file holding the ground and satellite images."""
    os.makedirs(path, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        lines.append(
            f"{i},{s.kind},{s.gt_pixel[0]!r},{s.gt_pixel[1]!r},"
            f"{s.heading!r},{s.meters_per_px!r}"
        )
        checkpoint.save_tensors(
            os.path.join(path, f"{i:06d}.cvml"),
            {"ground": s.ground, "satellite": s.satellite},
        )
    with open(os.path.join(path, INDEX_NAME), "w") as fh:
        fh.write("".join(line + "\n" for line in lines))


def read_dataset(path):
    """Read a dataset directory back; inverse of `write_dataset`."""
    index_path = os.path.join(path, INDEX_NAME)
    if not os.path.exists(index_path):
        raise DataError(f"missing dataset index {index_path}")
    samples = []
    with open(index_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise DataError(f"{index_path}: malformed record {line!r}")
            sid, kind = parts[0], parts[1]
            gt_u, gt_v, heading, mpp = map(float, parts[2:])
            tensor_path = os.path.join(path, f"{int(sid):06d}.cvml")
            try:
                arrays = checkpoint.load_tensors(tensor_path)
                ground = arrays["ground"]
                satellite = arrays["satellite"]
            except (DataError, KeyError, OSError) as exc:
                raise DataError(f"sample {sid}: {exc}") from exc
            samples.append(
                Sample(
                    ground=ground,
                    satellite=satellite,
                    gt_pixel=(gt_u, gt_v),
                    heading=heading,
                    meters_per_px=mpp,
                    kind=kind,
                )
            )
    return samples
