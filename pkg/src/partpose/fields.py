"""Composite implicit fields, grid sampling and meshing.

Each part field is ``sigmoid(a * sigmoid(b))`` where ``b`` is the category-common
logit and ``a`` the instance logit, both evaluated at part-local coordinates.
Parts are combined with a max over the part logits (``hard``) or, during
training, with a LogSumExp over the same logits (``soft``). Both are taken on
the logit scale and squashed afterwards, so outputs stay in (0, 1).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import RigidTransform
from .nets import PartModel, PoseOutput
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CHUNK = 8192


@dataclass
class Inference:
    """Encoder and pose-decoder outputs for a batch of input clouds."""

    z_s: Tensor
    pose: PoseOutput
    transforms: RigidTransform
    z_pc: Tensor
    z_p: Tensor


def infer(model: PartModel, clouds, use_r_residual: bool = True, states: dict | None = None) -> Inference:
    lat = model.encode(clouds)
    c_p, idx = model.quantize(lat.z_pc)
    pose = model.decode_pose(lat.z_p, c_p, use_r_residual=use_r_residual, code_index=idx)
    return Inference(lat.z_s, pose, model.part_transforms(pose, states), lat.z_pc, lat.z_p)


def part_logits(model: PartModel, z_s: Tensor, transforms: RigidTransform, x) -> tuple[Tensor, Tensor]:
    """Part logits ``a * sigmoid(b)`` and common logits ``b``, both ``(N, B, M)``.

    ``x`` holds world-space query points ``(B, M, 3)``.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    common, inst = model.shape_logits(model.to_local(transforms, x), z_s)
    return inst * common.sigmoid(), common


def part_indicator(common_logit, instance_logit) -> Tensor:
    """``sigmoid(instance * sigmoid(common))``: a product, so an empty template empties the part."""
    a = instance_logit if isinstance(instance_logit, Tensor) else Tensor(instance_logit)
    b = common_logit if isinstance(common_logit, Tensor) else Tensor(common_logit)
    return (a * b.sigmoid()).sigmoid()


def compose_logits(logits: Tensor, mode: str = "hard") -> Tensor:
    """Combine per-part logits along the leading axis."""
    if mode == "hard":
        return logits.max(axis=0)
    if mode == "soft":
        return logits.logsumexp(axis=0)
    raise ValueError(f"unknown composition mode {mode!r}")


def compose(logits: Tensor, mode: str = "hard") -> Tensor:
    """Whole-shape indicator from per-part logits ``(N, ...)``."""
    return compose_logits(logits, mode).sigmoid()


# -- grids --------------------------------------------------------------------------
@dataclass
class OccupancyGrid:
    """Indicator values at the cell centers of ``[-0.5, 0.5]^3``, indexed ``[ix, iy, iz]``."""

    res: int
    values: np.ndarray
    parts: np.ndarray | None = None

    @property
    def cell(self) -> float:
        return 1.0 / self.res


def grid_coords(res: int) -> np.ndarray:
    """Cell centers, ``(res**3, 3)``, x-major order matching ``values.reshape(-1)``."""
    c = -0.5 + (np.arange(res) + 0.5) / res
    g = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def sample_grid(field: Callable, res: int = 32, chunk: int = CHUNK) -> OccupancyGrid:
    """Evaluate ``field(points) -> (whole, parts or None)`` at every cell center in chunks."""
    if res not in (16, 32):
        log.warning("non-standard grid resolution %d", res)
    pts = grid_coords(res)
    whole, parts = [], []
    for start in range(0, len(pts), chunk):
        w, p = field(pts[start: start + chunk])
        whole.append(np.asarray(w, dtype=np.float64))
        if p is not None:
            parts.append(np.asarray(p, dtype=np.float64))
    values = np.concatenate(whole).reshape(res, res, res)
    part_vals = np.concatenate(parts, axis=-1).reshape(-1, res, res, res) if parts else None
    return OccupancyGrid(res, values, part_vals)


def model_field(model: PartModel, z_s: Tensor, transforms: RigidTransform, index: int = 0,
                mode: str = "hard") -> Callable:
    """Field closure for one instance of a batched inference result."""
    zs = Tensor(z_s.data[index: index + 1])
    tr = RigidTransform(Tensor(transforms.rotation.data[:, index: index + 1]),
                        Tensor(transforms.translation.data[:, index: index + 1]))

    def field(points):
        with no_grad():
            logits, _ = part_logits(model, zs, tr, np.asarray(points, dtype=model.dtype)[None])
            whole = compose(logits, mode).data[0]
            return whole, logits.sigmoid().data[:, 0]

    return field


# -- meshes ---------------------------------------------------------------------------
@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def volume(self) -> float:
        """Enclosed volume by the divergence theorem (closed meshes only)."""
        v = self.vertices[self.faces]
        return float(abs(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum()) / 6.0)

    def euler_characteristic(self) -> int:
        f = self.faces
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(f))
        return int(n_verts - n_edges + len(f))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform surface samples."""
        if self.is_empty:
            return np.zeros((0, 3))
        areas = self.triangle_areas()
        tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        v = self.vertices[self.faces[tri]]
        return (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]


def marching_cubes(values: np.ndarray, iso: float = 0.5) -> Mesh:
    """Iso-surface of a cell-centered grid on ``[-0.5, 0.5]^3``.

    The grid is padded with one layer of zeros so surfaces touching the cube
    boundary still close.
    """
    from skimage.measure import marching_cubes as _mc

    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("grid contains non-finite values")
    res = values.shape[0]
    padded = np.pad(values, 1, constant_values=0.0)
    if padded.max() <= iso or padded.min() >= iso:
        return Mesh.empty()
    verts, faces, _, _ = _mc(padded, level=iso, allow_degenerate=False)
    verts = -0.5 + (verts - 0.5) / res
    return Mesh(verts, faces.astype(np.int64))


def write_obj(path, groups: list[tuple[str, Mesh]], header: list[str] | None = None) -> None:
    """Wavefront OBJ with one ``g`` group per mesh; vertices at 6 decimals."""
    lines = [f"# {h}" for h in (header or [])]
    offset = 1
    for name, mesh in groups:
        lines.append(f"g {name}")
        lines.extend(f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices)
        lines.extend(f"f {a + offset} {b + offset} {c + offset}" for a, b, c in mesh.faces)
        offset += len(mesh.vertices)
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> dict[str, Mesh]:
    """Minimal reader for the files :func:`write_obj` produces."""
    verts, groups, current = [], {}, None
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(t) for t in line.split()[1:4]])
        elif line.startswith("g "):
            current = line.split(maxsplit=1)[1]
            groups[current] = []
        elif line.startswith("f "):
            groups.setdefault(current, []).append([int(t.split("/")[0]) - 1 for t in line.split()[1:4]])
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    out = {}
    for name, faces in groups.items():
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        used = np.unique(f) if len(f) else np.zeros(0, dtype=np.int64)
        remap = {int(o): k for k, o in enumerate(used)}
        out[name] = Mesh(verts[used], np.vectorize(remap.get)(f) if len(f) else f)
    return out


def part_meshes(grid: OccupancyGrid, iso: float = 0.5) -> list[tuple[str, Mesh]]:
    """Meshes of every active part (indicator above ``iso`` somewhere)."""
    out = []
    for i, vals in enumerate(grid.parts):
        if vals.max() > iso:
            out.append((f"part_{i}", marching_cubes(vals, iso)))
    return out


# -- interpolation ----------------------------------------------------------------------
def interpolate(model: PartModel, source_cloud, target_cloud, mode: str = "state", steps: int = 5,
                res: int = 32, use_r_residual: bool = True) -> list[dict]:
    """Grids along a linear path from the source to the target instance.

    ``shape`` mode moves ``z_s`` with the source joint states held fixed;
    ``state`` mode moves every joint state with the source ``z_s`` held fixed.
    Joint configurations (directions and pivots) always come from the source.
    """
    if mode not in ("shape", "state"):
        raise ValueError(f"interpolation mode must be 'shape' or 'state', got {mode!r}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    with no_grad():
        src = infer(model, np.asarray(source_cloud)[None], use_r_residual)
        tgt = infer(model, np.asarray(target_cloud)[None], use_r_residual)
    out = []
    for k in range(steps):
        t = 0.0 if steps == 1 else k / (steps - 1)
        if mode == "shape":
            z = (1 - t) * src.z_s.data + t * tgt.z_s.data
            states = {i: j.s.data for i, j in src.pose.joints.items()}
        else:
            z = src.z_s.data
            states = {i: (1 - t) * j.s.data + t * tgt.pose.joints[i].s.data for i, j in src.pose.joints.items()}
        with no_grad():
            tr = model.part_transforms(src.pose, {i: Tensor(s) for i, s in states.items()})
            grid = sample_grid(model_field(model, Tensor(z), tr), res)
        out.append({"t": t, "z_s": z[0].copy(), "states": {i: float(s[0]) for i, s in states.items()}, "grid": grid})
    return out
