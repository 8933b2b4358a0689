"""Procedural articulated categories with analytic occupancy.

Every part is a union of axis-aligned boxes given in its rest frame, which is
the world frame of the canonical pose (all joint states zero). A posed
instance moves each dynamic part by its ground-truth joint transform.

Record files hold the arrays of one instance back to back; the byte layout is
written into ``manifest.json`` so the files can be read without this module.
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import rotation_about

log = logging.getLogger(__name__)

CATEGORIES = ("toy-laptop", "toy-drawer", "toy-eyeglasses")
OUTSIDE = 255
NORMALIZED_EXTENT = 0.495


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half = np.asarray(self.half, dtype=np.float64)

    def faces(self):
        """``(center, u, v)`` for the six faces; points are ``center + a u + b v``, ``a, b`` in [-1, 1]."""
        out = []
        for ax in range(3):
            o1, o2 = [k for k in range(3) if k != ax]
            u = np.zeros(3)
            v = np.zeros(3)
            u[o1] = self.half[o1]
            v[o2] = self.half[o2]
            for sign in (-1.0, 1.0):
                c = self.center.copy()
                c[ax] += sign * self.half[ax]
                out.append((c, u, v))
        return out

    def corners(self) -> np.ndarray:
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=np.float64)
        return self.center + signs * self.half


@dataclass
class GtJoint:
    part: int
    kind: str
    axis: np.ndarray
    pivot: np.ndarray
    lo: float
    hi: float

    def to_dict(self) -> dict:
        return {"part": self.part, "kind": self.kind, "axis": self.axis.tolist(),
                "pivot": self.pivot.tolist(), "range": [self.lo, self.hi]}

    @classmethod
    def from_dict(cls, d: dict) -> "GtJoint":
        return cls(d["part"], d["kind"], np.asarray(d["axis"], dtype=np.float64),
                   np.asarray(d["pivot"], dtype=np.float64), float(d["range"][0]), float(d["range"][1]))


@dataclass
class Shape:
    """One procedural sample: part boxes plus a joint per dynamic part (part 0 is the fixed base)."""

    category: str
    seed: int
    parts: list[list[Box]]
    joints: list[GtJoint]

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def transforms(self, states) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-part ``(R, t)`` mapping rest-frame points to world points."""
        states = np.asarray(states, dtype=np.float64).reshape(-1)
        out = [(np.eye(3), np.zeros(3)) for _ in self.parts]
        for j, s in zip(self.joints, states):
            if j.kind == "revolute":
                rot = rotation_about(s, j.axis)
                out[j.part] = (rot, j.pivot - rot @ j.pivot)
            else:
                out[j.part] = (np.eye(3), j.axis * s)
        return out

    def corners(self, states) -> np.ndarray:
        pts = []
        for (rot, t), boxes in zip(self.transforms(states), self.parts):
            for b in boxes:
                pts.append(b.corners() @ rot.T + t)
        return np.concatenate(pts)

    def normalized(self, center, scale) -> "Shape":
        center = np.asarray(center, dtype=np.float64)
        parts = [[Box((b.center - center) * scale, b.half * scale) for b in boxes] for boxes in self.parts]
        joints = []
        for j in self.joints:
            pivot = (j.pivot - center) * scale if j.kind == "revolute" else np.zeros(3)
            hi = j.hi if j.kind == "revolute" else j.hi * scale
            joints.append(GtJoint(j.part, j.kind, j.axis.copy(), pivot, j.lo, hi))
        return Shape(self.category, self.seed, parts, joints)

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "seed": self.seed,
            "parts": [[{"center": b.center.tolist(), "half": b.half.tolist()} for b in boxes] for boxes in self.parts],
            "joints": [j.to_dict() for j in self.joints],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Shape":
        parts = [[Box(b["center"], b["half"]) for b in boxes] for boxes in d["parts"]]
        return cls(d["category"], d["seed"], parts, [GtJoint.from_dict(j) for j in d["joints"]])


# -- categories -------------------------------------------------------------------------
def _box_from_bounds(lo, hi) -> Box:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    return Box((lo + hi) / 2, (hi - lo) / 2)


def _laptop(rng) -> tuple[list, list]:
    depth = rng.uniform(0.6, 0.9)
    width = rng.uniform(0.8, 1.2)
    t_base = rng.uniform(0.12, 0.18)
    t_lid = rng.uniform(0.08, 0.12)
    base = _box_from_bounds([-depth / 2, -t_base, -width / 2], [depth / 2, 0.0, width / 2])
    lid = _box_from_bounds([-depth / 2, 0.0, -width / 2], [depth / 2, t_lid, width / 2])
    # closed lid rests on the base; the hinge runs along the back top edge
    hinge = GtJoint(1, "revolute", np.array([0.0, 0.0, 1.0]), np.array([-depth / 2, 0.0, 0.0]), 0.0, np.radians(135.0))
    return [[base], [lid]], [hinge]


def _drawer(rng) -> tuple[list, list]:
    depth = rng.uniform(0.5, 0.8)
    height = rng.uniform(0.6, 1.0)
    width = rng.uniform(0.6, 1.0)
    th = rng.uniform(0.06, 0.09)
    gap = 0.005
    x0, x1 = -depth / 2, depth / 2
    y0, y1 = -height / 2, height / 2
    z0, z1 = -width / 2, width / 2
    slot = (height - 3 * th) / 2
    cabinet = [
        _box_from_bounds([x0, y0, z0], [x0 + th, y1, z1]),
        _box_from_bounds([x0, y0, z0], [x1, y1, z0 + th]),
        _box_from_bounds([x0, y0, z1 - th], [x1, y1, z1]),
        _box_from_bounds([x0, y0, z0], [x1, y0 + th, z1]),
        _box_from_bounds([x0, y1 - th, z0], [x1, y1, z1]),
        _box_from_bounds([x0, -th / 2, z0], [x1, th / 2, z1]),
    ]
    parts, joints = [cabinet], []
    travel = 0.8 * (depth - th)
    for k, (lo, hi) in enumerate([(y0 + th, y0 + th + slot), (th / 2, th / 2 + slot)]):
        body = _box_from_bounds([x0 + th + gap, lo + gap, z0 + th + gap], [x1, hi - gap, z1 - th - gap])
        front = _box_from_bounds([x1, lo, z0 + th], [x1 + th, hi, z1 - th])
        parts.append([body, front])
        joints.append(GtJoint(k + 1, "prismatic", np.array([1.0, 0.0, 0.0]), np.zeros(3), 0.0, travel))
    return parts, joints


def _eyeglasses(rng) -> tuple[list, list]:
    width = rng.uniform(0.8, 1.1)
    tall = rng.uniform(0.3, 0.45)
    th = rng.uniform(0.08, 0.12)
    length = rng.uniform(0.6, 0.9)
    bridge = rng.uniform(0.06, 0.12)
    tw = 0.08
    frame = [
        _box_from_bounds([-width / 2, -th / 2, -tall / 2], [-bridge / 2, th / 2, tall / 2]),
        _box_from_bounds([bridge / 2, -th / 2, -tall / 2], [width / 2, th / 2, tall / 2]),
        _box_from_bounds([-bridge / 2, -th / 2, tall / 4], [bridge / 2, th / 2, tall / 2]),
    ]
    zt = (tall / 2 - 0.1, tall / 2)
    right = _box_from_bounds([width / 2 - tw, th / 2, zt[0]], [width / 2, th / 2 + length, zt[1]])
    left = _box_from_bounds([-width / 2, th / 2, zt[0]], [-width / 2 + tw, th / 2 + length, zt[1]])
    # temples fold inwards about their inner hinge edges
    hi = np.radians(90.0)
    joints = [
        GtJoint(1, "revolute", np.array([0.0, 0.0, 1.0]), np.array([width / 2 - tw, th / 2, 0.0]), 0.0, hi),
        GtJoint(2, "revolute", np.array([0.0, 0.0, -1.0]), np.array([-width / 2 + tw, th / 2, 0.0]), 0.0, hi),
    ]
    return [frame, [right], [left]], joints


_BUILDERS = {"toy-laptop": _laptop, "toy-drawer": _drawer, "toy-eyeglasses": _eyeglasses}


def sample_shape(category: str, seed: int) -> Shape:
    """Raw (unnormalized) shape of a category; deterministic in ``seed``."""
    if category not in _BUILDERS:
        raise ValueError(f"unknown category {category!r}; choose from {', '.join(CATEGORIES)}")
    parts, joints = _BUILDERS[category](np.random.default_rng([seed, 0]))
    return Shape(category, int(seed), parts, joints)


def sample_states(shape: Shape, n: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, n_joints)`` states; row 0 is the canonical pose, others uniform per joint range."""
    if n < 1:
        raise ValueError("need at least one pose")
    lo = np.array([j.lo for j in shape.joints])
    hi = np.array([j.hi for j in shape.joints])
    states = lo + (hi - lo) * rng.random((n, len(shape.joints)))
    states[0] = 0.0
    return states


def normalize(shape: Shape, states: np.ndarray) -> tuple[Shape, np.ndarray, dict]:
    """Center the union bounding box of all poses and scale its half extent to 0.495."""
    corners = np.concatenate([shape.corners(s) for s in states])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    center = (lo + hi) / 2
    scale = NORMALIZED_EXTENT / ((hi - lo).max() / 2)
    out = shape.normalized(center, scale)
    states = states.copy()
    for k, j in enumerate(shape.joints):
        if j.kind == "prismatic":
            states[:, k] *= scale
    return out, states, {"center": center.tolist(), "scale": float(scale)}


# -- occupancy and surfaces -----------------------------------------------------------------
def _to_rest(points: np.ndarray, rot: np.ndarray, t: np.ndarray) -> np.ndarray:
    return (points - t) @ rot


def analytic_occupancy(shape: Shape, states, coords) -> tuple[np.ndarray, np.ndarray]:
    """Indicators (u8 0/1) and part labels (``OUTSIDE`` where empty).

    A point is inside when its rest-frame image lies in one of the part's
    closed boxes. Points inside several parts take the part whose containing
    box center is nearest.
    """
    coords = np.asarray(coords, dtype=np.float64)
    best = np.full(len(coords), np.inf)
    labels = np.full(len(coords), OUTSIDE, dtype=np.uint8)
    for i, ((rot, t), boxes) in enumerate(zip(shape.transforms(states), shape.parts)):
        local = _to_rest(coords, rot, t)
        for b in boxes:
            inside = np.all(np.abs(local - b.center) <= b.half, axis=1)
            d = np.linalg.norm(local - b.center, axis=1)
            take = inside & (d < best)
            best[take] = d[take]
            labels[take] = i
    return (labels != OUTSIDE).astype(np.uint8), labels


def _face_table(shape: Shape):
    rows = []
    for i, boxes in enumerate(shape.parts):
        for bi, b in enumerate(boxes):
            for c, u, v in b.faces():
                rows.append((i, bi, c, u, v, 4.0 * np.linalg.norm(u) * np.linalg.norm(v)))
    return rows


def surface_sample(shape: Shape, states, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted points on box faces that are not strictly inside another box."""
    if n < 1:
        raise ValueError("need at least one surface point")
    faces = _face_table(shape)
    areas = np.array([f[-1] for f in faces])
    probs = areas / areas.sum()
    poses = shape.transforms(states)
    boxes = [(i, bi, b) for i, bs in enumerate(shape.parts) for bi, b in enumerate(bs)]
    pts_out, lab_out, have = [], [], 0
    while have < n:
        m = max(2 * (n - have), 256)
        fi = rng.choice(len(faces), size=m, p=probs)
        ab = rng.uniform(-1.0, 1.0, (m, 2))
        c = np.stack([faces[k][2] for k in fi])
        u = np.stack([faces[k][3] for k in fi])
        v = np.stack([faces[k][4] for k in fi])
        rest = c + ab[:, :1] * u + ab[:, 1:] * v
        part = np.array([faces[k][0] for k in fi])
        owner = np.array([faces[k][1] for k in fi])
        world = np.empty_like(rest)
        for i, (rot, t) in enumerate(poses):
            sel = part == i
            world[sel] = rest[sel] @ rot.T + t
        keep = np.ones(m, dtype=bool)
        for i, bi, b in boxes:
            rot, t = poses[i]
            local = _to_rest(world, rot, t)
            strictly = np.all(np.abs(local - b.center) < b.half - 1e-9, axis=1)
            keep &= ~(strictly & ~((part == i) & (owner == bi)))
        pts_out.append(world[keep])
        lab_out.append(part[keep].astype(np.uint8))
        have += int(keep.sum())
    return np.concatenate(pts_out)[:n], np.concatenate(lab_out)[:n]


def grid_points(res: int) -> np.ndarray:
    c = -0.5 + (np.arange(res) + 0.5) / res
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)


def stratified_grid_sample(occ: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` grid cells, half inside and half outside where possible."""
    inside = np.flatnonzero(occ)
    outside = np.flatnonzero(occ == 0)
    n_in = min(len(inside), n // 2)
    n_out = min(len(outside), n - n_in)
    n_in = min(len(inside), n - n_out)
    idx = np.concatenate([rng.choice(inside, n_in, replace=False), rng.choice(outside, n_out, replace=False)])
    return np.sort(idx)


# -- instances ------------------------------------------------------------------------------
@dataclass
class ArticulatedInstance:
    sample_id: int
    pose_id: int
    surface: np.ndarray
    surface_labels: np.ndarray
    occ16_coords: np.ndarray
    occ16: np.ndarray
    occ16_labels: np.ndarray
    occ32_coords: np.ndarray
    occ32: np.ndarray
    occ32_labels: np.ndarray
    states: np.ndarray
    split: str = "train"

    @property
    def canonical(self) -> bool:
        return bool(np.all(self.states == 0))


def make_instance(shape: Shape, states, sample_id: int, pose_id: int, n_points: int, n_occ: int,
                  rng: np.random.Generator, split: str = "train") -> ArticulatedInstance:
    surface, surface_labels = surface_sample(shape, states, n_points, rng)
    g16 = grid_points(16)
    occ16, lab16 = analytic_occupancy(shape, states, g16)
    g32 = grid_points(32)
    occ32_full, lab32_full = analytic_occupancy(shape, states, g32)
    idx = stratified_grid_sample(occ32_full, n_occ, rng)
    return ArticulatedInstance(
        sample_id, pose_id, surface, surface_labels, g16, occ16, lab16,
        g32[idx], occ32_full[idx], lab32_full[idx], np.asarray(states, dtype=np.float64), split,
    )


RECORD_FIELDS = (
    ("surface", "<f4", 3),
    ("surface_labels", "|u1", 0),
    ("occ16_coords", "<f4", 3),
    ("occ16", "|u1", 0),
    ("occ16_labels", "|u1", 0),
    ("occ32_coords", "<f4", 3),
    ("occ32", "|u1", 0),
    ("occ32_labels", "|u1", 0),
    ("states", "<f4", -1),
)


def record_layout(n_points: int, n_occ: int, n_joints: int) -> list[dict]:
    rows = {"surface": n_points, "surface_labels": n_points, "occ16_coords": 4096, "occ16": 4096,
            "occ16_labels": 4096, "occ32_coords": n_occ, "occ32": n_occ, "occ32_labels": n_occ}
    layout, offset = [], 0
    for name, dtype, cols in RECORD_FIELDS:
        shape = [n_joints] if cols == -1 else ([rows[name], cols] if cols else [rows[name]])
        nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        layout.append({"name": name, "dtype": dtype, "shape": shape, "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return layout


def encode_record(inst: ArticulatedInstance, layout: list[dict]) -> bytes:
    out = bytearray()
    for f in layout:
        arr = np.asarray(getattr(inst, f["name"]), dtype=np.dtype(f["dtype"])).reshape(f["shape"])
        out += arr.tobytes()
    return bytes(out)


def decode_record(blob: bytes, layout: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for f in layout:
        arr = np.frombuffer(blob, dtype=np.dtype(f["dtype"]), count=int(np.prod(f["shape"])), offset=f["offset"])
        out[f["name"]] = arr.reshape(f["shape"])
    return out


@dataclass
class GenConfig:
    category: str = "toy-laptop"
    samples: int = 20
    poses: int = 50
    test_samples: int = 5
    test_poses: int = 20
    points: int = 4096
    occ_points: int = 4096
    seed: int = 0


def generate_dataset(out, cfg: GenConfig, force: bool = False) -> dict:
    """Write a dataset directory; byte-identical for the same config."""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {out} is not empty (use force to overwrite)")
        shutil.rmtree(out)
    if cfg.category not in _BUILDERS:
        raise ValueError(f"unknown category {cfg.category!r}; choose from {', '.join(CATEGORIES)}")
    out.mkdir(parents=True, exist_ok=True)
    samples, instances, layout = [], [], None
    plan = [("train", cfg.samples, cfg.poses), ("test", cfg.test_samples, cfg.test_poses)]
    sid = 0
    for split_no, (split, n_samples, n_poses) in enumerate(plan):
        for k in range(n_samples):
            shape_seed = int(np.random.SeedSequence([cfg.seed, split_no, k]).generate_state(1)[0])
            raw = sample_shape(cfg.category, shape_seed)
            rng = np.random.default_rng([cfg.seed, split_no, k, 1])
            states = sample_states(raw, n_poses, rng)
            shape, states, norm = normalize(raw, states)
            if layout is None:
                layout = record_layout(cfg.points, cfg.occ_points, len(shape.joints))
            samples.append({"id": sid, "split": split, "seed": shape_seed, "normalization": norm, **shape.to_dict()})
            for p in range(n_poses):
                inst = make_instance(shape, states[p], sid, p, cfg.points, cfg.occ_points,
                                     np.random.default_rng([cfg.seed, split_no, k, 2, p]), split)
                name = f"{split}_{sid:04d}_{p:04d}.bin"
                (out / name).write_bytes(encode_record(inst, layout))
                instances.append({"file": name, "sample": sid, "pose": p, "split": split,
                                  "canonical": inst.canonical, "states": states[p].tolist()})
            sid += 1
    manifest = {
        "format": "partpose-dataset",
        "version": __version__,
        "category": cfg.category,
        "config": cfg.__dict__,
        "splits": {s: [r["file"] for r in instances if r["split"] == s] for s, _, _ in plan},
        "samples": samples,
        "instances": instances,
        "record_layout": layout or [],
        "labels": {"outside": OUTSIDE},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


class Dataset:
    """Reader for a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        try:
            self.manifest = json.loads(path.read_text())
        except OSError as exc:
            raise OSError(f"cannot read dataset manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid dataset manifest {path}: {exc}") from exc
        if self.manifest.get("format") != "partpose-dataset":
            raise ValueError(f"{path} is not a dataset manifest")
        self.shapes = {s["id"]: Shape.from_dict(s) for s in self.manifest["samples"]}
        self.records = self.manifest["instances"]
        self._cache: dict[int, ArticulatedInstance] = {}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def category(self) -> str:
        return self.manifest["category"]

    def indices(self, split: str | None = None) -> list[int]:
        return [k for k, r in enumerate(self.records) if split is None or r["split"] == split]

    def find(self, sample: int, pose: int) -> int:
        for k, r in enumerate(self.records):
            if r["sample"] == sample and r["pose"] == pose:
                return k
        raise KeyError(f"no instance for sample {sample} pose {pose}")

    def canonical_index(self, k: int) -> int:
        return self.find(self.records[k]["sample"], 0)

    def __getitem__(self, k: int) -> ArticulatedInstance:
        if k not in self._cache:
            r = self.records[k]
            path = self.root / r["file"]
            try:
                blob = path.read_bytes()
            except OSError as exc:
                raise OSError(f"cannot read record {path}: {exc}") from exc
            arrs = decode_record(blob, self.manifest["record_layout"])
            # the manifest keeps the states at full precision
            arrs["states"] = np.asarray(r["states"], dtype=np.float64)
            self._cache[k] = ArticulatedInstance(
                r["sample"], r["pose"], split=r["split"],
                **{n: a.astype(np.float64) if a.dtype.kind == "f" else a for n, a in arrs.items()},
            )
        return self._cache[k]

    def shape_of(self, k: int) -> Shape:
        return self.shapes[self.records[k]["sample"]]

    def gt_transforms(self, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return self.shape_of(k).transforms(self[k].states)
