"""Two-stage training loop.

Each step performs one critic update followed by one generator update. Stage 1
trains on the full 16^3 occupancy grid with the joint direction fixed to its
category-common part; stage 2 switches to 32^3 samples and adds the
instance-dependent direction residual.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import losses as L
from .datagen import ArticulatedInstance
from .fields import compose, infer, part_logits
from .geometry import JointKind
from .nets import NetConfig, PartModel, init_params, save_checkpoint
from .tensor import Tensor, concat

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch: int = 18
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stage1_steps: int = 3000
    stage2_steps: int = 2000
    seed: int = 0
    input_points: int = 4096
    occ_points: int = 4096
    vol_points: int = 512
    adv_points: int = 1024
    checkpoint_every: int = 500
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    net: NetConfig = field(default_factory=lambda: NetConfig(dtype="float32"))

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        if self.batch < 2:
            raise ValueError("batch must be >= 2 (the joint-state spread needs batch statistics)")
        if self.stage1_steps < 0 or self.stage2_steps < 0 or self.stage1_steps + self.stage2_steps < 1:
            raise ValueError("stage step counts must be non-negative with at least one step in total")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown training config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("weights", "net")}
        d["weights"] = asdict(self.weights)
        d["net"] = self.net.to_dict()
        return d


class Adam:
    """Adam over a fixed list of tensors; missing gradients count as zero."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class Batch:
    clouds: np.ndarray
    coords: np.ndarray
    occ: np.ndarray


def make_batch(instances: Sequence[ArticulatedInstance], stage: int, cfg: TrainConfig,
               rng: np.random.Generator, dtype) -> Batch:
    clouds, coords, occ = [], [], []
    for inst in instances:
        n = len(inst.surface)
        pick = rng.choice(n, cfg.input_points, replace=False) if cfg.input_points < n else np.arange(n)
        clouds.append(inst.surface[pick])
        c, o = (inst.occ16_coords, inst.occ16) if stage == 1 else (inst.occ32_coords, inst.occ32)
        pick = rng.choice(len(c), cfg.occ_points, replace=False) if cfg.occ_points < len(c) else np.arange(len(c))
        coords.append(c[pick])
        occ.append(o[pick])
    return Batch(np.stack(clouds).astype(dtype), np.stack(coords).astype(dtype), np.stack(occ).astype(dtype))


def _check_finite(parts: dict[str, Tensor], step: int) -> None:
    for name, t in parts.items():
        if not np.all(np.isfinite(t.data)):
            raise TrainingError(f"non-finite {name} loss at step {step}")


def generator_forward(model: PartModel, batch: Batch, stage: int, cfg: TrainConfig,
                      rng: np.random.Generator) -> tuple[dict[str, Tensor], Tensor, np.ndarray]:
    """All generator losses except the adversarial term, plus the fake and real clouds."""
    w = cfg.weights
    dt = model.dtype
    inf = infer(model, batch.clouds, use_r_residual=stage == 2)
    x = Tensor(batch.coords)
    logits, common = part_logits(model, inf.z_s, inf.transforms, x)
    parts = {"rec": L.reconstruction_loss(compose(logits, "soft"), compose(common, "soft"), batch.occ, w)}

    b = batch.coords.shape[0]
    u = Tensor(rng.uniform(-0.5, 0.5, (b, cfg.vol_points, 3)).astype(dt))
    _, posed = model.shape_logits(model.to_local(inf.transforms, u), inf.z_s)
    rest_x = u.reshape(1, b, cfg.vol_points, 3).broadcast_to((model.n_parts, b, cfg.vol_points, 3))
    _, rest = model.shape_logits(rest_x, inf.z_s)
    parts["vol"] = L.volume_loss(posed, rest, w)

    code = model.p("codebook").data[inf.pose.code_index]
    parts["vq"] = L.vq_loss(inf.z_pc, code)
    parts["codebook"] = L.codebook_loss(inf.z_pc, model.p("codebook"), inf.pose.code_index, w)

    rev = model.revolute
    parts["dev"] = L.deviation_loss([inf.pose.q_z[i] for i in rev], [inf.pose.r_z[i] for i in model.dynamic], w)
    inside = logits.data > 0.0
    pivots = [inf.pose.joints[i].q for i in rev]
    parts["loc"] = L.location_loss(pivots, batch.coords, batch.occ, [inside[i] for i in rev], w)
    parts["var"] = L.variance_loss([inf.pose.joints[i].s for i in model.dynamic], pivots, w)

    # fake clouds: decoded joint configuration with states resampled from U(0, h)
    n_adv = min(cfg.adv_points, batch.coords.shape[1])
    pick = rng.choice(batch.coords.shape[1], n_adv, replace=False) if n_adv < batch.coords.shape[1] else np.arange(n_adv)
    states = {}
    for i in model.dynamic:
        h = w.h_revolute if model.kinds[i] is JointKind.REVOLUTE else w.h_prismatic
        states[i] = Tensor(rng.uniform(0.0, h, b).astype(dt))
    fake_tr = model.part_transforms(inf.pose, states)
    xa = Tensor(batch.coords[:, pick])
    fake_logits, _ = part_logits(model, inf.z_s, fake_tr, xa)
    fake_occ = compose(fake_logits, "soft").reshape(b, n_adv, 1)
    fake = concat([xa, fake_occ], axis=-1)
    real = np.concatenate([batch.coords[:, pick], batch.occ[:, pick, None]], axis=-1)
    return parts, fake, real


def train_step(model: PartModel, instances: Sequence[ArticulatedInstance], stage: int, cfg: TrainConfig,
               opt_g: Adam, opt_d: Adam, rng: np.random.Generator, step: int = 0) -> dict[str, float]:
    """One critic update on ``L_adv_d`` then one generator update on the summed generator losses."""
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    batch = make_batch(instances, stage, cfg, rng, model.dtype)
    w = cfg.weights
    parts, fake, real = generator_forward(model, batch, stage, cfg, rng)
    _check_finite(parts, step)

    model.power_iteration()
    x_hat = L.interpolates(real, fake.data, rng).astype(model.dtype)
    d_loss = L.discriminator_loss(model.discriminate, Tensor(real), Tensor(fake.data), Tensor(x_hat), w)
    _check_finite({"adv_d": d_loss}, step)
    opt_d.zero_grad()
    d_loss.backward(leaves=opt_d.params)
    opt_d.step()

    parts["adv_g"] = L.generator_adv_loss(model.discriminate, fake, w)
    _check_finite({"adv_g": parts["adv_g"]}, step)
    total = L.sum_losses(parts)
    opt_g.zero_grad()
    total.backward(leaves=opt_g.params)
    opt_g.step()
    # generator backward also reaches critic weights; those gradients are discarded
    opt_d.zero_grad()

    report = {k: float(v.item()) for k, v in parts.items()}
    report["total_g"] = float(total.item())
    report["adv_d"] = float(d_loss.item())
    return report


class Trainer:
    """Owns the model, both optimizers and the batch RNG."""

    def __init__(self, cfg: TrainConfig, model: PartModel | None = None):
        self.cfg = cfg
        self.model = model or init_params(cfg.net, cfg.seed)
        self.opt_g = Adam(self.model.generator_params(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        self.opt_d = Adam(self.model.discriminator_params(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0

    def stage_of(self, step: int) -> int:
        return 1 if step < self.cfg.stage1_steps else 2

    def run_step(self, instances: Sequence[ArticulatedInstance]) -> dict:
        stage = self.stage_of(self.step)
        pick = self.rng.choice(len(instances), min(self.cfg.batch, len(instances)), replace=False)
        report = train_step(self.model, [instances[k] for k in pick], stage, self.cfg,
                            self.opt_g, self.opt_d, self.rng, self.step)
        report = {"step": self.step, "stage": stage, **report}
        self.step += 1
        return report

    def checkpoint(self, path) -> None:
        save_checkpoint(path, self.model, extra={
            "step": self.step, "stage": self.stage_of(max(self.step - 1, 0)),
            "train_config": self.cfg.to_dict(), "version": __version__,
        })


def fit(instances: Sequence[ArticulatedInstance], cfg: TrainConfig, out_dir=None,
        model: PartModel | None = None, progress: bool = False) -> Trainer:
    """Run stage 1 then stage 2; checkpoints every ``checkpoint_every`` steps and at stage ends."""
    if len(instances) < 2:
        raise ValueError("need at least two training instances")
    trainer = Trainer(cfg, model)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            log_fh = open(out / "train_log.jsonl", "w")
        except OSError as exc:
            raise OSError(f"cannot prepare output directory {out}: {exc}") from exc
    total = cfg.stage1_steps + cfg.stage2_steps
    t0 = time.time()
    try:
        while trainer.step < total:
            rec = trainer.run_step(instances)
            rec["elapsed"] = round(time.time() - t0, 3)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            if progress and (trainer.step % 50 == 0 or trainer.step == total):
                log.info("step %d stage %d rec %.5f total %.4f (%.0fs)", rec["step"], rec["stage"],
                         rec["rec"], rec["total_g"], rec["elapsed"])
            if out is not None:
                boundary = trainer.step == cfg.stage1_steps or trainer.step == total
                if boundary or (cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0):
                    trainer.checkpoint(out / f"step_{trainer.step:06d}.ckpt")
        if out is not None:
            trainer.checkpoint(out / "final.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return trainer
