"""Metrics and the unsupervised part-labeling protocol.

Reconstructed parts carry no semantic labels, so each one is mapped to the
ground-truth label it most often explains on training surfaces. A surface
point is explained by the part with the highest indicator when some part
covers it, otherwise by the part whose reconstructed surface lies nearest.
Part indices are 0-based throughout.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .datagen import ArticulatedInstance, Dataset, Shape, grid_points, surface_sample
from .fields import Mesh, OccupancyGrid, infer, marching_cubes, model_field, sample_grid
from .geometry import JointKind, direction_error_deg, line_distance
from .nets import PartModel
from .tensor import no_grad

log = logging.getLogger(__name__)

METRICS = ("iou", "epe", "chamfer", "fscore", "joint", "occupancy")
DEFAULT_THRESHOLDS = {
    "state_revolute_deg": (5.0, 10.0, 15.0, 20.0, 30.0),
    "state_prismatic": (0.02, 0.05, 0.1, 0.2),
    "direction_deg": (2.0, 5.0, 10.0, 15.0, 20.0),
    "axis_distance": (0.02, 0.05, 0.1, 0.2),
}
CHAMFER_FALLBACK = 1.0


# -- part assignment and label maps ----------------------------------------------------
def nearest_parts(indicators: np.ndarray, points: np.ndarray, surfaces: Sequence[np.ndarray] | None,
                  iso: float = 0.5) -> np.ndarray:
    """Reconstructed part explaining each point; -1 when nothing was reconstructed.

    ``indicators`` is ``(N, M)``. Points covered by some part (indicator above
    ``iso``) take the argmax; the rest take the part owning the nearest point of
    ``surfaces`` (one ``(K_i, 3)`` array per part).
    """
    indicators = np.asarray(indicators)
    out = np.argmax(indicators, axis=0)
    uncovered = indicators.max(axis=0) <= iso
    if not np.any(uncovered):
        return out
    sizes = [len(s) for s in surfaces] if surfaces is not None else []
    if sum(sizes) == 0:
        out[uncovered] = -1
        return out
    owner = np.repeat(np.arange(len(sizes)), sizes)
    tree = cKDTree(np.concatenate([s for s in surfaces if len(s)]))
    _, idx = tree.query(np.asarray(points)[uncovered])
    out[uncovered] = owner[idx]
    return out


@dataclass
class PartLabelMap:
    """Vote table ``(N parts, L labels)`` and the majority label of each part (``None`` when unused)."""

    votes: np.ndarray

    @property
    def n_parts(self) -> int:
        return self.votes.shape[0]

    @property
    def mapping(self) -> list[int | None]:
        return [int(np.argmax(v)) if v.sum() > 0 else None for v in self.votes]

    def parts_for(self, label: int) -> list[int]:
        return [i for i, lab in enumerate(self.mapping) if lab == label]

    def labels_of(self, parts: np.ndarray) -> np.ndarray:
        """Map part indices to labels; unused parts and -1 become -1."""
        table = np.array([-1 if m is None else m for m in self.mapping] + [-1])
        return table[np.where(parts < 0, self.n_parts, parts)]

    def to_dict(self) -> dict:
        return {"votes": self.votes.tolist(), "mapping": self.mapping}


def vote_table(assignments: Sequence[np.ndarray], labels: Sequence[np.ndarray], n_parts: int,
               n_labels: int) -> np.ndarray:
    """Count (part, gt label) co-occurrences; points with no part (-1) cast no vote."""
    votes = np.zeros((n_parts, n_labels), dtype=np.int64)
    for a, lab in zip(assignments, labels):
        a = np.asarray(a)
        keep = a >= 0
        np.add.at(votes, (a[keep], np.asarray(lab)[keep]), 1)
    return votes


def label_iou_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean IoU over the gt labels present, as a percentage."""
    ious = []
    for lab in np.unique(gt):
        p = pred == lab
        g = gt == lab
        ious.append(np.sum(p & g) / np.sum(p | g))
    return float(100.0 * np.mean(ious))


# -- model predictions -----------------------------------------------------------------
@dataclass
class JointEstimate:
    kind: JointKind
    state: float
    direction: np.ndarray
    pivot: np.ndarray | None


class Prediction:
    """Reconstruction of one instance: part fields, part poses and joint estimates."""

    def __init__(self, model: PartModel, inf, index: int, res: int = 32):
        self.model = model
        self.res = res
        self.field = model_field(model, inf.z_s, inf.transforms, index)
        self.rotation = inf.transforms.rotation.data[:, index].astype(np.float64)
        self.translation = inf.transforms.translation.data[:, index].astype(np.float64)
        self.joints = {}
        for i, j in inf.pose.joints.items():
            pivot = j.q.data[index].astype(np.float64) if model.kinds[i] is JointKind.REVOLUTE else None
            self.joints[i] = JointEstimate(model.kinds[i], float(j.s.data[index]),
                                           j.u.data[index].astype(np.float64), pivot)
        self._grid = None
        self._surfaces = None

    def indicators(self, points: np.ndarray, chunk: int = 8192) -> np.ndarray:
        parts = [self.field(points[k: k + chunk])[1] for k in range(0, len(points), chunk)]
        return np.concatenate(parts, axis=-1) if parts else np.zeros((self.model.n_parts, 0))

    def occupancy(self, points: np.ndarray) -> np.ndarray:
        """Whole-shape hard-composed indicator."""
        return self.indicators(points).max(axis=0)

    @property
    def grid(self) -> OccupancyGrid:
        if self._grid is None:
            self._grid = sample_grid(self.field, self.res)
        return self._grid

    def part_surfaces(self) -> list[np.ndarray]:
        if self._surfaces is None:
            self._surfaces = []
            for vals in self.grid.parts:
                mesh = marching_cubes(vals) if vals.max() > 0.5 else Mesh.empty()
                self._surfaces.append(mesh.vertices)
        return self._surfaces

    def assign(self, points: np.ndarray) -> np.ndarray:
        ind = self.indicators(points)
        if np.all(ind.max(axis=0) > 0.5):
            return np.argmax(ind, axis=0)
        return nearest_parts(ind, points, self.part_surfaces())

    def mesh(self) -> Mesh:
        if self.grid.values.max() <= 0.5:
            return Mesh.empty()
        return marching_cubes(self.grid.values)

    def relative_flow(self, canonical: "Prediction", parts: np.ndarray, points: np.ndarray) -> np.ndarray:
        return relative_flow((self.rotation, self.translation), (canonical.rotation, canonical.translation),
                             parts, points)


def relative_flow(target: tuple, canonical: tuple, parts: np.ndarray, points: np.ndarray) -> np.ndarray:
    """``B_i(target) B_i(canonical)^-1 x - x`` for each point with its assigned part ``i``.

    Each pose set is ``(rotations (N, 3, 3), translations (N, 3))``.
    """
    r_c, t_c = canonical[0][parts], canonical[1][parts]
    r_t, t_t = target[0][parts], target[1][parts]
    local = np.einsum("mji,mj->mi", r_c, points - t_c)
    return np.einsum("mij,mj->mi", r_t, local) + t_t - points


def predict(model: PartModel, instances: Sequence[ArticulatedInstance], res: int = 32,
            batch: int = 16) -> list[Prediction]:
    out = []
    for k in range(0, len(instances), batch):
        chunk = instances[k: k + batch]
        clouds = np.stack([i.surface for i in chunk]).astype(model.dtype)
        with no_grad():
            inf = infer(model, clouds)
        out.extend(Prediction(model, inf, b, res) for b in range(len(chunk)))
    return out


# -- labeling --------------------------------------------------------------------------
def build_label_map(model: PartModel, instances: Sequence[ArticulatedInstance], n_labels: int | None = None,
                    predictions: Sequence[Prediction] | None = None) -> PartLabelMap:
    """Majority-vote map from reconstructed parts to gt labels over ``instances``."""
    if n_labels is None:
        n_labels = int(max(i.surface_labels.max() for i in instances)) + 1
    preds = predictions if predictions is not None else predict(model, instances)
    assignments = [p.assign(i.surface) for p, i in zip(preds, instances)]
    votes = vote_table(assignments, [i.surface_labels for i in instances], model.n_parts, n_labels)
    if votes.sum() == 0:
        raise ValueError("the model reconstructs nothing on every labeling instance")
    return PartLabelMap(votes)


def label_iou(model: PartModel, label_map: PartLabelMap, instances: Sequence[ArticulatedInstance],
              predictions: Sequence[Prediction] | None = None) -> float:
    preds = predictions if predictions is not None else predict(model, instances)
    scores = [label_iou_score(label_map.labels_of(p.assign(i.surface)), i.surface_labels)
              for p, i in zip(preds, instances)]
    return float(np.mean(scores))


# -- flows -----------------------------------------------------------------------------
def gt_flow(shape: Shape, canonical_states, target_states, points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Ground-truth motion of canonical surface points to the target pose."""
    src = shape.transforms(canonical_states)
    dst = shape.transforms(target_states)
    flow = np.zeros_like(points)
    for lab in np.unique(labels):
        m = labels == lab
        r_c, t_c = src[lab]
        r_t, t_t = dst[lab]
        local = (points[m] - t_c) @ r_c
        flow[m] = local @ r_t.T + t_t - points[m]
    return flow


def endpoint_error(pred_flow: np.ndarray, true_flow: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(pred_flow - true_flow, axis=-1)))


def epe(model: PartModel, target: ArticulatedInstance, canonical: ArticulatedInstance, shape: Shape,
        predictions: tuple[Prediction, Prediction] | None = None) -> float:
    """Endpoint error of the predicted canonical-to-target deformation."""
    tp, cp = predictions if predictions is not None else predict(model, [target, canonical])
    x = canonical.surface
    parts = cp.assign(x)
    if np.any(parts < 0):
        return endpoint_error(np.zeros_like(x), gt_flow(shape, canonical.states, target.states, x,
                                                         canonical.surface_labels))
    flow = tp.relative_flow(cp, parts, x)
    return endpoint_error(flow, gt_flow(shape, canonical.states, target.states, x, canonical.surface_labels))


def identity_epe(target: ArticulatedInstance, canonical: ArticulatedInstance, shape: Shape) -> float:
    """EPE of predicting no motion at all."""
    x = canonical.surface
    true_flow = gt_flow(shape, canonical.states, target.states, x, canonical.surface_labels)
    return endpoint_error(np.zeros_like(x), true_flow)


# -- surface metrics ------------------------------------------------------------------
def chamfer_and_fscore(pred, gt_points: np.ndarray, tau: float = 0.01, n: int = 10_000,
                       rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Chamfer L1 and F-score (percent) between a predicted surface and gt points.

    ``pred`` is a :class:`Mesh` (sampled with ``n`` points) or a point array.
    """
    if isinstance(pred, Mesh):
        if pred.is_empty:
            return CHAMFER_FALLBACK, 0.0
        pred = pred.sample(n, rng if rng is not None else np.random.default_rng(0))
    pred = np.asarray(pred, dtype=np.float64)
    gt_points = np.asarray(gt_points, dtype=np.float64)
    if len(pred) == 0:
        return CHAMFER_FALLBACK, 0.0
    d_pg, _ = cKDTree(gt_points).query(pred)
    d_gp, _ = cKDTree(pred).query(gt_points)
    chamfer = 0.5 * (d_pg.mean() + d_gp.mean())
    precision = np.mean(d_pg < tau)
    recall = np.mean(d_gp < tau)
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return float(chamfer), float(100.0 * f)


def occupancy_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred) > 0.5
    g = np.asarray(gt) > 0.5
    union = np.sum(p | g)
    return 1.0 if union == 0 else float(np.sum(p & g) / union)


# -- joints ---------------------------------------------------------------------------
@dataclass
class JointRecord:
    """Errors of one gt dynamic part in one instance; ``None`` when not measurable."""

    label: int
    kind: str
    n_assigned: int
    kind_match: bool
    state_error: float | None = None
    direction_error: float | None = None
    axis_error: float | None = None
    pred_state: float | None = None
    gt_state: float | None = None


def gt_kinds(shape: Shape) -> list[str]:
    kinds = ["fixed"] * shape.n_parts
    for j in shape.joints:
        kinds[j.part] = j.kind
    return kinds


def joint_records(label_map: PartLabelMap, shape: Shape, states, pred: Prediction,
                  canonical: Prediction | None = None) -> list[JointRecord]:
    """Per gt dynamic part: assignment count, kind match and parameter errors.

    States are compared as motion away from the canonical pose: the predicted
    state of the canonical instance is subtracted when given, and the sign is
    flipped when the predicted direction opposes the gt axis.
    """
    out = []
    for g, joint in enumerate(shape.joints):
        parts = label_map.parts_for(joint.part)
        rec = JointRecord(joint.part, joint.kind, len(parts), False)
        if len(parts) == 1:
            i = parts[0]
            est = pred.joints.get(i)
            rec.kind_match = est is not None and est.kind.value == joint.kind
            if rec.kind_match:
                sign = 1.0 if est.direction @ joint.axis >= 0 else -1.0
                s = est.state - (canonical.joints[i].state if canonical is not None else 0.0)
                rec.pred_state = sign * s
                rec.gt_state = float(states[g])
                err = abs(rec.pred_state - rec.gt_state)
                rec.state_error = float(np.degrees(err)) if joint.kind == "revolute" else float(err)
                rec.direction_error = direction_error_deg(est.direction, joint.axis)
                if joint.kind == "revolute":
                    rec.axis_error = line_distance(est.pivot, est.direction, joint.pivot, joint.axis)
        out.append(rec)
    return out


def joint_accuracy_from_records(records: Sequence[JointRecord], thresholds: dict | None = None) -> dict:
    """Accuracy curves (percent) keyed by error type then threshold.

    A record is correct at ``t`` when exactly one part is assigned, the kinds
    match and the error is below ``t``. State and axis curves only count gt
    parts of the kinds they apply to.
    """
    thresholds = thresholds or DEFAULT_THRESHOLDS
    select = {
        "state_revolute_deg": (lambda r: r.kind == "revolute", "state_error"),
        "state_prismatic": (lambda r: r.kind == "prismatic", "state_error"),
        "direction_deg": (lambda r: True, "direction_error"),
        "axis_distance": (lambda r: r.kind == "revolute", "axis_error"),
    }
    curves = {}
    for name, ts in thresholds.items():
        keep, attr = select[name]
        pool = [r for r in records if keep(r)]
        if not pool:
            continue
        curves[name] = {}
        for t in ts:
            ok = [r.n_assigned == 1 and r.kind_match and getattr(r, attr) is not None and getattr(r, attr) < t
                  for r in pool]
            curves[name][str(t)] = float(100.0 * np.mean(ok))
    return curves


def part_type_accuracy(label_map: PartLabelMap, model: PartModel, shape: Shape) -> float:
    """Percent of gt parts whose most-voted assigned part has the matching joint kind."""
    kinds = gt_kinds(shape)
    ok = []
    for lab, kind in enumerate(kinds):
        parts = label_map.parts_for(lab)
        if not parts:
            ok.append(False)
            continue
        best = max(parts, key=lambda i: label_map.votes[i, lab])
        ok.append(model.kinds[best].value == kind)
    return float(100.0 * np.mean(ok))


def parts_per_gt_part(label_map: PartLabelMap, n_labels: int) -> float:
    return float(np.mean([len(label_map.parts_for(lab)) for lab in range(n_labels)]))


def state_correlation(records: Sequence[JointRecord]) -> dict[int, float]:
    """Pearson r between predicted and gt states per gt label, over measurable records."""
    out = {}
    for lab in sorted({r.label for r in records}):
        pairs = [(r.pred_state, r.gt_state) for r in records if r.label == lab and r.pred_state is not None]
        if len(pairs) < 3:
            continue
        p, g = np.array(pairs).T
        if p.std() == 0 or g.std() == 0:
            out[lab] = 0.0
            continue
        out[lab] = float(np.corrcoef(p, g)[0, 1])
    return out


# -- full report ----------------------------------------------------------------------
@dataclass
class EvalReport:
    metrics: list
    label_source: str
    n_test: int
    tau: float
    iou: float | None = None
    epe: float | None = None
    epe_x100: float | None = None
    epe_identity: float | None = None
    chamfer: float | None = None
    chamfer_x100: float | None = None
    fscore: float | None = None
    occupancy_iou: float | None = None
    joint_accuracy: dict | None = None
    part_type_accuracy: float | None = None
    parts_per_gt_part: float | None = None
    state_pearson: dict | None = None
    label_map: dict | None = None
    config: dict = field(default_factory=dict)
    version: str = __version__

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


def evaluate(model: PartModel, dataset: Dataset, metrics: Sequence[str] = METRICS, label_source: str = "canonical",
             tau: float = 0.01, res: int = 32, seed: int = 0, thresholds: dict | None = None,
             config: dict | None = None) -> EvalReport:
    """Run the requested metrics on the test split (training split when there is none)."""
    unknown = sorted(set(metrics) - set(METRICS))
    if unknown:
        raise ValueError(f"unknown metric(s): {', '.join(unknown)}")
    if label_source not in ("canonical", "all"):
        raise ValueError("label_source must be 'canonical' or 'all'")
    rng = np.random.default_rng(seed)
    test_idx = dataset.indices("test")
    if not test_idx:
        log.warning("dataset has no test split; evaluating on training instances")
        test_idx = dataset.indices("train")
    n_labels = max(s.n_parts for s in dataset.shapes.values())
    report = EvalReport(list(metrics), label_source, len(test_idx), tau, config=config or {})

    test = [dataset[k] for k in test_idx]
    test_pred = predict(model, test, res)
    by_index = dict(zip(test_idx, test_pred))

    def canonical_pred(k):
        c = dataset.canonical_index(k)
        if c not in by_index:
            by_index[c] = predict(model, [dataset[c]], res)[0]
        return c, by_index[c]

    label_map = None
    if {"iou", "joint"} & set(metrics):
        train_idx = dataset.indices("train")
        if label_source == "canonical":
            train_idx = [k for k in train_idx if dataset.records[k]["pose"] == 0]
        label_map = build_label_map(model, [dataset[k] for k in train_idx], n_labels)
        report.label_map = label_map.to_dict()
    if "iou" in metrics:
        report.iou = label_iou(model, label_map, test, test_pred)
    if "epe" in metrics:
        errs, base = [], []
        for k, p in zip(test_idx, test_pred):
            if dataset.records[k]["pose"] == 0:
                continue
            c, cp = canonical_pred(k)
            shape = dataset.shape_of(k)
            errs.append(epe(model, dataset[k], dataset[c], shape, (p, cp)))
            base.append(identity_epe(dataset[k], dataset[c], shape))
        if errs:
            report.epe = float(np.mean(errs))
            report.epe_x100 = 100.0 * report.epe
            report.epe_identity = float(np.mean(base))
    if {"chamfer", "fscore"} & set(metrics):
        ch, fs = [], []
        for k, p in zip(test_idx, test_pred):
            gt_pts, _ = surface_sample(dataset.shape_of(k), dataset[k].states, 10_000, rng)
            c, f = chamfer_and_fscore(p.mesh(), gt_pts, tau, 10_000, rng)
            ch.append(c)
            fs.append(f)
        if "chamfer" in metrics:
            report.chamfer = float(np.mean(ch))
            report.chamfer_x100 = 100.0 * report.chamfer
        if "fscore" in metrics:
            report.fscore = float(np.mean(fs))
    if "occupancy" in metrics:
        g = grid_points(16)
        scores = [occupancy_iou(p.occupancy(g), i.occ16) for p, i in zip(test_pred, test)]
        report.occupancy_iou = float(np.mean(scores))
    if "joint" in metrics:
        records = []
        for k, p in zip(test_idx, test_pred):
            _, cp = canonical_pred(k)
            records += joint_records(label_map, dataset.shape_of(k), dataset[k].states, p, cp)
        report.joint_accuracy = joint_accuracy_from_records(records, thresholds)
        report.part_type_accuracy = part_type_accuracy(label_map, model, dataset.shape_of(test_idx[0]))
        report.parts_per_gt_part = parts_per_gt_part(label_map, n_labels)
        report.state_pearson = {str(k): v for k, v in state_correlation(records).items()}
    return report
