"""Learnable networks and their parameters.

One :class:`PartModel` owns every weight: the point-cloud encoder, the paired
category-common / instance-dependent shape decoders of all ``N`` parts (stored
stacked along a leading part axis so one batched matmul serves all parts), the
two category-common pose decoders, the instance-dependent pose decoder, the
vector-quantization codebook and the critic.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import JointKind, JointParams, RigidTransform, compose_part_pose
from .tensor import Tensor, broadcast_to, concat, linear, stack

DEFAULT_PART_TABLE = (
    ("fixed", (1.0, 0.0, 0.0)),
    ("revolute", (0.0, 0.0, 1.0)),
    ("revolute", (0.0, 0.0, -1.0)),
    ("revolute", (0.0, 1.0, 0.0)),
    ("prismatic", (1.0, 0.0, 0.0)),
    ("prismatic", (1.0, 0.0, 0.0)),
    ("prismatic", (1.0, 0.0, 0.0)),
    ("prismatic", (1.0, 0.0, 0.0)),
)


@dataclass
class NetConfig:
    """Network sizes. Defaults are the desk-scale widths."""

    enc_hidden: int = 128
    z_shape: int = 32
    z_pose: int = 16
    z_pose_common: int = 16
    shape_hidden: int = 64
    shape_layers: int = 4
    pose_hidden: int = 64
    pose_layers: int = 3
    disc_widths: tuple = (64, 128)
    disc_head: int = 64
    n_codes: int = 4
    omega: float = 30.0
    first_omega: float = 30.0
    revolute_scale: float = float(np.pi)
    prismatic_scale: float = 1.0
    leaky_slope: float = 0.2
    dtype: str = "float64"
    part_table: tuple = DEFAULT_PART_TABLE

    def __post_init__(self):
        self.disc_widths = tuple(self.disc_widths)
        self.part_table = tuple((str(k), tuple(float(v) for v in e)) for k, e in self.part_table)
        kinds = [JointKind(k) for k, _ in self.part_table]
        if kinds.count(JointKind.FIXED) < 1:
            raise ValueError("part table needs at least one fixed part")

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if "part_table" in d:
            d["part_table"] = tuple((k, tuple(e)) for k, e in d["part_table"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_widths"] = list(self.disc_widths)
        d["part_table"] = [[k, list(e)] for k, e in self.part_table]
        return d


@dataclass
class LatentBundle:
    z_s: Tensor
    z_p: Tensor
    z_pc: Tensor


@dataclass
class PoseOutput:
    """Decoded joint parameters for every non-fixed part, batched over instances."""

    joints: dict[int, JointParams]
    code_index: np.ndarray
    c_p: Tensor
    r_z: dict[int, Tensor] = field(default_factory=dict)
    q_z: dict[int, Tensor] = field(default_factory=dict)

    def states(self) -> dict[int, np.ndarray]:
        return {i: j.s.data for i, j in self.joints.items()}


def _siren_uniform(rng, n_in: int, shape, omega_scaled: bool) -> np.ndarray:
    bound = np.sqrt(6.0 / n_in)
    if omega_scaled:
        bound /= 30.0
    return rng.uniform(-bound, bound, size=shape)


def _default_uniform(rng, n_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=shape)


class PartModel:
    """All learnable weights plus the fixed part table."""

    def __init__(self, config: NetConfig | None = None):
        self.config = config or NetConfig()
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        cfg = self.config
        self.kinds = [JointKind(k) for k, _ in cfg.part_table]
        self.directions = [np.asarray(e, dtype=np.float64) for _, e in cfg.part_table]
        self.n_parts = len(self.kinds)
        self.dynamic = [i for i, k in enumerate(self.kinds) if k is not JointKind.FIXED]
        self.revolute = [i for i, k in enumerate(self.kinds) if k is JointKind.REVOLUTE]
        self.prismatic = [i for i, k in enumerate(self.kinds) if k is JointKind.PRISMATIC]

    # -- parameter bookkeeping ------------------------------------------------
    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def generator_params(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if not n.startswith("disc.")]

    def discriminator_params(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith("disc.")]

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # -- encoder -----------------------------------------------------------------
    def encode(self, points) -> LatentBundle:
        """PointNet encoder with max-pooled context; permutation invariant over points."""
        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=self.dtype))
        if x.ndim == 2:
            x = x.reshape((1,) + x.shape)
        if x.shape[1] < 1:
            raise ValueError("cannot encode an empty point cloud")
        p = self.p
        net = linear(x, p("enc.pos.w"), p("enc.pos.b"))
        net = linear(net.relu(), p("enc.0.w"), p("enc.0.b"))
        for k in (1, 2, 3):
            pooled = broadcast_to(net.max(axis=1, keepdims=True), net.shape)
            net = linear(concat([net, pooled], axis=-1).relu(), p(f"enc.{k}.w"), p(f"enc.{k}.b"))
        feat = net.max(axis=1).relu()
        return LatentBundle(
            z_s=linear(feat, p("enc.zs.w"), p("enc.zs.b")),
            z_p=linear(feat, p("enc.zp.w"), p("enc.zp.b")),
            z_pc=linear(feat, p("enc.zpc.w"), p("enc.zpc.b")),
        )

    # -- vector quantization --------------------------------------------------------
    def nearest_code(self, z: np.ndarray) -> np.ndarray:
        return nearest_code(z, self.p("codebook").data)

    def quantize(self, z_pc: Tensor) -> tuple[Tensor, np.ndarray]:
        """Nearest codeword with a straight-through gradient into ``z_pc``."""
        idx = self.nearest_code(z_pc.data)
        code = self.p("codebook").data[idx]
        c_st = z_pc + Tensor(code - z_pc.data)
        return c_st, idx

    # -- pose decoders --------------------------------------------------------------
    def _mlp_norm(self, x: Tensor, prefix: str, norm: str) -> Tensor:
        p = self.p
        h = x
        for k in range(self.config.pose_layers - 1):
            h = linear(h, p(f"{prefix}.{k}.w"), p(f"{prefix}.{k}.b"))
            h = _normalize(h)
            if norm == "layer":
                h = h * p(f"{prefix}.{k}.g") + p(f"{prefix}.{k}.beta")
            h = h.relu()
        k = self.config.pose_layers - 1
        return linear(h, p(f"{prefix}.{k}.w"), p(f"{prefix}.{k}.b"))

    def decode_pose(self, z_p: Tensor, c_p: Tensor, use_r_residual: bool = True,
                    code_index: np.ndarray | None = None) -> PoseOutput:
        """Joint parameters of every non-fixed part.

        ``c_p`` feeds the two category-common decoders (direction residual
        bias ``r_c`` and pivot bias ``q_c``); ``z_p`` feeds the shared-backbone
        instance decoder emitting states ``s`` and the residuals ``r_z``, ``q_z``.
        With ``use_r_residual=False`` the direction uses ``r = r_c`` only.
        """
        cfg = self.config
        p = self.p
        n_dyn, n_rev = len(self.dynamic), len(self.revolute)
        batch = z_p.shape[0]
        r_c_all = self._mlp_norm(c_p, "pose_r", "instance").reshape(batch, n_dyn, 3)
        q_c_all = self._mlp_norm(c_p, "pose_q", "layer").reshape(batch, n_rev, 3) if n_rev else None
        h = z_p
        for k in range(cfg.pose_layers - 1):
            h = linear(h, p(f"pose_z.{k}.w"), p(f"pose_z.{k}.b")).relu()
        s_all = linear(h, p("pose_z.s.w"), p("pose_z.s.b")).sigmoid()
        r_z_all = linear(h, p("pose_z.r.w"), p("pose_z.r.b")).reshape(batch, n_dyn, 3)
        q_z_all = linear(h, p("pose_z.q.w"), p("pose_z.q.b")).reshape(batch, n_rev, 3) if n_rev else None
        joints, r_z, q_z = {}, {}, {}
        for a, i in enumerate(self.dynamic):
            scale = cfg.revolute_scale if self.kinds[i] is JointKind.REVOLUTE else cfg.prismatic_scale
            s = s_all[:, a] * scale
            r_z[i] = r_z_all[:, a]
            kw = dict(e=self.directions[i], s=s, r_c=r_c_all[:, a], r_z=r_z[i] if use_r_residual else None)
            if self.kinds[i] is JointKind.REVOLUTE:
                b = self.revolute.index(i)
                q_z[i] = q_z_all[:, b]
                kw.update(q_c=q_c_all[:, b], q_z=q_z[i])
            joints[i] = JointParams(**kw)
        return PoseOutput(joints=joints, code_index=code_index, c_p=c_p, r_z=r_z, q_z=q_z)

    def part_transforms(self, pose: PoseOutput, states: dict[int, Tensor] | None = None) -> RigidTransform:
        """Stacked part poses with rotation ``(N, B, 3, 3)`` and translation ``(N, B, 3)``.

        ``states`` optionally replaces the decoded joint state of some parts
        while keeping their decoded joint configuration.
        """
        batch = pose.c_p.shape[0]
        rots, trans = [], []
        ident = RigidTransform.identity((batch,), dtype=self.dtype)
        for i, kind in enumerate(self.kinds):
            if kind is JointKind.FIXED:
                rots.append(ident.rotation)
                trans.append(ident.translation)
                continue
            j = pose.joints[i]
            if states is not None and i in states:
                j = JointParams(e=j.e, s=states[i], r_c=j.r_c, r_z=j.r_z, q_c=j.q_c, q_z=j.q_z, _u=j.u)
            b = compose_part_pose(kind, j)
            rots.append(b.rotation)
            trans.append(b.translation)
        return RigidTransform(stack(rots, axis=0), stack(trans, axis=0))

    # -- shape decoders ---------------------------------------------------------------
    def to_local(self, poses: RigidTransform, x: Tensor) -> Tensor:
        """``B_i^{-1} x`` for every part: ``x`` is ``(B, M, 3)``, result ``(N, B, M, 3)``."""
        n = self.n_parts
        b, m, _ = x.shape
        xs = broadcast_to(x.reshape(1, b, m, 3), (n, b, m, 3))
        t = broadcast_to(poses.translation.reshape(n, b, 1, 3), (n, b, m, 3))
        local = (xs - t).reshape(n * b, m, 3) @ poses.rotation.reshape(n * b, 3, 3)
        return local.reshape(n, b, m, 3)

    def _sine_stack(self, h: Tensor, prefix: str) -> Tensor:
        cfg = self.config
        p = self.p
        for k in range(1, cfg.shape_layers):
            h = linear(h, p(f"{prefix}.{k}.w"), p(f"{prefix}.{k}.b")).sin(cfg.omega)
        k = cfg.shape_layers
        return linear(h, p(f"{prefix}.{k}.w"), p(f"{prefix}.{k}.b"))

    def shape_logits(self, x_local: Tensor, z_s: Tensor) -> tuple[Tensor, Tensor]:
        """Common and instance logits of every part at part-local coordinates.

        ``x_local`` is ``(N, B, M, 3)`` and ``z_s`` is ``(B, d)``; both outputs
        are ``(N, B, M)``. The common decoder never sees ``z_s``.
        """
        cfg = self.config
        p = self.p
        n, b, m, _ = x_local.shape
        flat = x_local.reshape(n, b * m, 3)
        common = linear(flat, p("shape_c.0.w"), p("shape_c.0.b")).sin(cfg.first_omega)
        common = self._sine_stack(common, "shape_c").reshape(n, b, m)
        zs = broadcast_to(z_s.reshape(1, b, -1), (n, b, z_s.shape[-1]))
        zpart = linear(zs, p("shape_z.0.wz"), Tensor(np.zeros((n, cfg.shape_hidden), dtype=self.dtype)))
        zpart = broadcast_to(zpart.reshape(n, b, 1, -1), (n, b, m, cfg.shape_hidden)).reshape(n, b * m, -1)
        inst = (linear(flat, p("shape_z.0.w"), p("shape_z.0.b")) + zpart).sin(cfg.first_omega)
        inst = self._sine_stack(inst, "shape_z").reshape(n, b, m)
        return common, inst

    # -- critic -----------------------------------------------------------------------
    def _sn_weight(self, name: str, update: bool) -> Tensor:
        w = self.p(name)
        u = self.buffers[name + ".u"]
        v = self.buffers[name + ".v"]
        if update:
            wd = w.data.astype(np.float64)
            v = wd.T @ u
            v /= np.linalg.norm(v) + 1e-12
            u = wd @ v
            u /= np.linalg.norm(u) + 1e-12
            self.buffers[name + ".u"] = u
            self.buffers[name + ".v"] = v
        sigma = ((Tensor(u.astype(self.dtype).reshape(1, -1)) @ w) * Tensor(v.astype(self.dtype))).sum()
        return w / sigma

    def power_iteration(self) -> None:
        """One power-iteration step for every spectrally normalized weight."""
        for name in self.params:
            if name.startswith("disc.") and name.endswith(".w"):
                self._sn_weight(name, update=True)

    def discriminate(self, cloud, update: bool = False) -> Tensor:
        """Critic value per 4-D point cloud ``(B, M, 4)`` (or a single ``(M, 4)`` cloud)."""
        x = cloud if isinstance(cloud, Tensor) else Tensor(np.asarray(cloud, dtype=self.dtype))
        single = x.ndim == 2
        if single:
            x = x.reshape((1,) + x.shape)
        slope = self.config.leaky_slope
        h = x
        for k in range(len(self.config.disc_widths)):
            h = linear(h, self._sn_weight(f"disc.{k}.w", update), self.p(f"disc.{k}.b")).leaky_relu(slope)
        h = h.max(axis=1)
        h = linear(h, self._sn_weight("disc.h.w", update), self.p("disc.h.b")).leaky_relu(slope)
        out = linear(h, self._sn_weight("disc.o.w", update), self.p("disc.o.b"))
        out = out.reshape(out.shape[0])
        return out.reshape(()) if single else out


def _normalize(h: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance over the feature axis of each sample."""
    mu = broadcast_to(h.mean(axis=-1, keepdims=True), h.shape)
    c = h - mu
    var = broadcast_to((c * c).mean(axis=-1, keepdims=True), h.shape)
    return c / (var + eps).sqrt()


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword per row; ties resolve to the lowest index."""
    z = np.atleast_2d(z)
    d = ((z[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def init_params(config: NetConfig | None = None, seed: int = 0) -> PartModel:
    """Deterministically initialized model for ``seed``."""
    model = PartModel(config)
    cfg = model.config
    rng = np.random.default_rng(seed)
    add = model._add
    h = cfg.enc_hidden
    add("enc.pos.w", _default_uniform(rng, 3, (3, 2 * h)))
    add("enc.pos.b", _default_uniform(rng, 3, (2 * h,)))
    add("enc.0.w", _default_uniform(rng, 2 * h, (2 * h, h)))
    add("enc.0.b", _default_uniform(rng, 2 * h, (h,)))
    for k in (1, 2, 3):
        add(f"enc.{k}.w", _default_uniform(rng, 2 * h, (2 * h, h)))
        add(f"enc.{k}.b", _default_uniform(rng, 2 * h, (h,)))
    for name, dim in (("zs", cfg.z_shape), ("zp", cfg.z_pose), ("zpc", cfg.z_pose_common)):
        add(f"enc.{name}.w", _default_uniform(rng, h, (h, dim)))
        add(f"enc.{name}.b", _default_uniform(rng, h, (dim,)))

    n, w = model.n_parts, cfg.shape_hidden
    # coordinate layers: unscaled uniform bound; every other sine layer scaled by 1/30
    add("shape_c.0.w", _siren_uniform(rng, 3, (n, 3, w), omega_scaled=False))
    add("shape_c.0.b", _default_uniform(rng, 3, (n, w)))
    n_in = 3 + cfg.z_shape
    add("shape_z.0.w", _siren_uniform(rng, n_in, (n, 3, w), omega_scaled=False))
    add("shape_z.0.wz", _siren_uniform(rng, n_in, (n, cfg.z_shape, w), omega_scaled=False))
    add("shape_z.0.b", _default_uniform(rng, n_in, (n, w)))
    for prefix in ("shape_c", "shape_z"):
        for k in range(1, cfg.shape_layers):
            add(f"{prefix}.{k}.w", _siren_uniform(rng, w, (n, w, w), omega_scaled=True))
            add(f"{prefix}.{k}.b", _default_uniform(rng, w, (n, w)))
        k = cfg.shape_layers
        add(f"{prefix}.{k}.w", _siren_uniform(rng, w, (n, w, 1), omega_scaled=True))
        add(f"{prefix}.{k}.b", np.zeros((n, 1)))

    ph = cfg.pose_hidden
    n_dyn, n_rev = len(model.dynamic), len(model.revolute)
    for prefix, d_in, d_out in (("pose_r", cfg.z_pose_common, 3 * n_dyn), ("pose_q", cfg.z_pose_common, 3 * n_rev)):
        dims = [d_in] + [ph] * (cfg.pose_layers - 1) + [d_out]
        for k in range(cfg.pose_layers):
            add(f"{prefix}.{k}.w", _default_uniform(rng, dims[k], (dims[k], dims[k + 1])))
            add(f"{prefix}.{k}.b", _default_uniform(rng, dims[k], (dims[k + 1],)))
            if prefix == "pose_q" and k < cfg.pose_layers - 1:
                add(f"{prefix}.{k}.g", np.ones(dims[k + 1]))
                add(f"{prefix}.{k}.beta", np.zeros(dims[k + 1]))
    dims = [cfg.z_pose] + [ph] * (cfg.pose_layers - 1)
    for k in range(cfg.pose_layers - 1):
        add(f"pose_z.{k}.w", _default_uniform(rng, dims[k], (dims[k], dims[k + 1])))
        add(f"pose_z.{k}.b", _default_uniform(rng, dims[k], (dims[k + 1],)))
    add("pose_z.s.w", _default_uniform(rng, ph, (ph, n_dyn)))
    add("pose_z.s.b", _default_uniform(rng, ph, (n_dyn,)))
    # residual heads start at zero so that r = r_c and q = q_c initially
    add("pose_z.r.w", np.zeros((ph, 3 * n_dyn)))
    add("pose_z.r.b", np.zeros(3 * n_dyn))
    add("pose_z.q.w", np.zeros((ph, 3 * n_rev)))
    add("pose_z.q.b", np.zeros(3 * n_rev))

    add("codebook", rng.uniform(-1.0 / cfg.n_codes, 1.0 / cfg.n_codes, (cfg.n_codes, cfg.z_pose_common)))

    dims = [4] + list(cfg.disc_widths)
    for k in range(len(cfg.disc_widths)):
        add(f"disc.{k}.w", _default_uniform(rng, dims[k], (dims[k], dims[k + 1])))
        add(f"disc.{k}.b", _default_uniform(rng, dims[k], (dims[k + 1],)))
    add("disc.h.w", _default_uniform(rng, dims[-1], (dims[-1], cfg.disc_head)))
    add("disc.h.b", _default_uniform(rng, dims[-1], (cfg.disc_head,)))
    add("disc.o.w", _default_uniform(rng, cfg.disc_head, (cfg.disc_head, 1)))
    add("disc.o.b", np.zeros(1))
    for name, t in model.params.items():
        if name.startswith("disc.") and name.endswith(".w"):
            u = rng.normal(size=t.shape[0])
            v = rng.normal(size=t.shape[1])
            model.buffers[name + ".u"] = u / np.linalg.norm(u)
            model.buffers[name + ".v"] = v / np.linalg.norm(v)
    return model


# -- checkpoint file -------------------------------------------------------------------
_MAGIC = b"PPDCKPT1"


def save_checkpoint(path, model: PartModel, extra: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian payload``.

    The payload holds every parameter and then every buffer, in header order,
    as raw little-endian floats of the model dtype (buffers always f64).
    """
    entries, blobs, offset = [], [], 0
    items = [("param", n, t.data.astype(model.dtype.newbyteorder("<"))) for n, t in model.params.items()]
    items += [("buffer", n, np.asarray(b, dtype="<f8")) for n, b in model.buffers.items()]
    for kind, name, arr in items:
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                        "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "partpose-checkpoint",
        "version": __version__,
        "dtype": model.dtype.newbyteorder("<").str,
        "part_table": [[k, list(e)] for k, e in model.config.part_table],
        "config": model.config.to_dict(),
        "tensors": entries,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path) -> tuple[PartModel, dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[len(_MAGIC): len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    header = json.loads(blob[start: start + n].decode("utf-8"))
    payload = memoryview(blob)[start + n:]
    model = PartModel(NetConfig.from_dict(header["config"]))
    for e in header["tensors"]:
        arr = np.frombuffer(payload[e["offset"]: e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arr = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
        if e["kind"] == "param":
            model.params[e["name"]] = Tensor(arr.copy(), requires_grad=True, name=e["name"])
        else:
            model.buffers[e["name"]] = arr.copy()
    return model, header
