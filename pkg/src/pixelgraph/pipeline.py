"""End-to-end model: two toy CNN encoders, one latent graph, a pixel classifier.

The encoders stand in for the pretrained backbones of a full-scale system;
they are three 3x3 conv+relu blocks with stride 2,2,1 (output stride 4),
the 2D branch wider than the 3D branch. Everything from the projection
matrix to the classifier logits lives on the gradient tape, so the whole
pipeline trains end to end with Adam.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import graph_build as gb
from . import tensor as tc
from .errors import (
    ConfigError,
    DimensionError,
    NumericError,
    TrainingDivergedError,
)
from .geometry import NeighborhoodParams, encode_normals, fill_invalid
from .gnn import GcnLayer, GnnStack, ReasoningLayer, stack_forward
from .graph_build import GraphBuildConfig, ProjectionMatrix
from .losses import (
    LabelMap,
    LossWeights,
    centroid_mse,
    cross_entropy,
    kl_uniformity,
    total_loss,
)
from .metrics import EvalReport, confusion_matrix, report_from_confusion
from .reprojection import ReprojectionConfig, reproject
from .scenes import SyntheticScene
from .tensor import GradientTape, Tensor, uniform_init

FEATURE_STRIDE = 4


@dataclass(frozen=True)
class GnnSpec:
    layer_type: str = "graph_convolution"
    num_layers: int = 1
    aggregation: str = "sum"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("need at least one GNN layer")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    num_classes: int = 6
    widths_2d: tuple[int, ...] = (16, 32, 64)
    widths_3d: tuple[int, ...] = (8, 16, 32)
    input_3d: str = "normal"          # or "depth"
    graph_enabled: bool = True
    graph: GraphBuildConfig = field(default_factory=GraphBuildConfig)
    gnn: GnnSpec = field(default_factory=GnnSpec)
    residual: bool = True
    tied_reprojection: bool = False
    loss: LossWeights = field(default_factory=LossWeights)
    kl_variant: str = "marginal"

    def __post_init__(self):
        if self.image_size % FEATURE_STRIDE != 0:
            raise ConfigError(f"image size {self.image_size} must be divisible by 4")
        if self.input_3d not in ("depth", "normal"):
            raise ConfigError(f"unknown 3D input mode {self.input_3d!r}")
        if len(self.widths_2d) != 3 or len(self.widths_3d) != 3:
            raise ConfigError("each encoder takes exactly three block widths")
        if self.graph.node_dim > min(self.widths_2d[-1], self.widths_3d[-1]):
            raise ConfigError(
                f"node dim {self.graph.node_dim} exceeds an encoder output width"
            )

    @property
    def feature_size(self) -> int:
        return self.image_size // FEATURE_STRIDE


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 2e-4
    batch_size: int = 4
    epochs: int = 30


@dataclass
class PreparedScene:
    """Per-scene constants: encoder inputs, labels, and the aligned depth."""

    rgb: Tensor        # 3,H,W
    input3d: Tensor    # 3,H,W normals or 1,H,W scaled depth
    labels: LabelMap
    scene: SyntheticScene


def prepare_scene(scene: SyntheticScene, cfg: ModelConfig) -> PreparedScene:
    rgb = tc.constant(np.ascontiguousarray(scene.rgb.transpose(2, 0, 1)))
    if cfg.input_3d == "normal":
        nm = fill_invalid(encode_normals(scene.depth, scene.intrinsics,
                                         NeighborhoodParams()))
        input3d = tc.constant(np.ascontiguousarray(nm.n.transpose(2, 0, 1)))
    else:
        z = np.where(scene.depth.valid, scene.depth.z / cfg.graph.z_max, 0.0)
        input3d = tc.constant(z[None, :, :])
    return PreparedScene(
        rgb=rgb,
        input3d=input3d,
        labels=LabelMap(scene.labels.astype(np.int64), cfg.num_classes),
        scene=scene,
    )


def prepare_scenes(scenes: Sequence[SyntheticScene], cfg: ModelConfig,
                   threads: int = 1) -> list[PreparedScene]:
    if threads <= 1:
        return [prepare_scene(s, cfg) for s in scenes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: prepare_scene(s, cfg), scenes))


# Parameter-group prefixes reported by the gradient check.
PARAM_GROUPS = (
    ("projection", "graph.projection."),
    ("transform", "graph.transform"),
    ("fusion", "graph.fusion."),
    ("centroid", "graph.centroid."),
    ("gnn", "gnn."),
    ("reprojection", "reproject."),
    ("encoders", "encoder"),
    ("classifier", "classifier."),
)


class SegmentationModel:
    """Parameter store plus the forward pass; weights live in a flat dict."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        in3 = 3 if cfg.input_3d == "normal" else 1
        self._add_encoder(rng, "encoder2d", 3, cfg.widths_2d)
        self._add_encoder(rng, "encoder3d", in3, cfg.widths_3d)

        n, d = cfg.graph.num_nodes, cfg.graph.node_dim
        c2, c3 = cfg.widths_2d[-1], cfg.widths_3d[-1]
        hw = cfg.feature_size * cfg.feature_size
        self._add(rng, "graph.projection.weights", (n, c2), c2)
        self._add(rng, "graph.transform2d.weights", (d, c2), c2)
        self._add(rng, "graph.transform3d.weights", (d, c3), c3)
        if cfg.graph.fusion == "concat":
            self._add(rng, "graph.fusion.weights", (2 * d, d), 2 * d)
        if cfg.graph.edge_source == "centroids":
            self._add(rng, "graph.centroid.weights", (hw, 3), hw)
        for i in range(cfg.gnn.num_layers):
            if cfg.gnn.layer_type == "graph_convolution":
                self._add(rng, f"gnn.layer{i}.W_S", (d, d), d)
                self._add(rng, f"gnn.layer{i}.W_N", (d, d), d)
            else:
                self._add(rng, f"gnn.layer{i}.W", (d, d), d)
        if not cfg.tied_reprojection:
            # Near-silent start for the graph residual: the update has to earn
            # its way into the feature map instead of perturbing it at full
            # amplitude from step one.
            self._add(rng, "reproject.t_prime", (c2, d), d)
            damped = self.params["reproject.t_prime"].data * 0.05
            self.params["reproject.t_prime"] = Tensor(damped, requires_grad=True)
        self._add(rng, "classifier.kernel", (cfg.num_classes, c2, 1, 1), c2)

    def _add(self, rng, name, shape, fan_in):
        self.params[name] = uniform_init(shape, fan_in, rng)

    def _add_encoder(self, rng, prefix, c_in, widths):
        c = c_in
        for i, w in enumerate(widths):
            self._add(rng, f"{prefix}.block{i}.kernel", (w, c, 3, 3), c * 9)
            c = w

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name in self.params:
            for group, prefix in PARAM_GROUPS:
                if name.startswith(prefix):
                    groups.setdefault(group, []).append(name)
                    break
        return groups

    def _encode(self, x: Tensor, prefix: str) -> Tensor:
        strides = (2, 2, 1)
        for i, stride in enumerate(strides):
            x = tc.relu(tc.conv2d(x, self.params[f"{prefix}.block{i}.kernel"],
                                  stride=stride, padding=1))
        return x

    def _gnn_stack(self) -> GnnStack:
        cfg = self.cfg.gnn
        layers = []
        for i in range(cfg.num_layers):
            if cfg.layer_type == "graph_convolution":
                layers.append(GcnLayer(self.params[f"gnn.layer{i}.W_S"],
                                       self.params[f"gnn.layer{i}.W_N"],
                                       cfg.aggregation))
            else:
                layers.append(ReasoningLayer(self.params[f"gnn.layer{i}.W"]))
        return GnnStack(layers, cfg.layer_type)

    def forward(self, inputs: PreparedScene) -> tuple[Tensor, dict]:
        cfg = self.cfg
        x2 = self._encode(inputs.rgb, "encoder2d")
        diagnostics: dict = {}
        if cfg.graph_enabled:
            x3 = self._encode(inputs.input3d, "encoder3d")
            if x2.shape[1:] != x3.shape[1:]:
                raise DimensionError(
                    f"graph_build stage: branch extents differ, {x2.shape} vs {x3.shape}"
                )
            # One projection matrix per sample; the 3D branch inherits it.
            p = gb.generate_projection(x2, self.params["graph.projection.weights"])
            if cfg.graph.assignment == "hard":
                p = gb.harden(p)
            z2 = gb.transform_features(x2, self.params["graph.transform2d.weights"])
            z3 = gb.transform_features(x3, self.params["graph.transform3d.weights"])
            v2 = gb.project_nodes(z2, p)
            v3 = gb.project_nodes(z3, p)
            fused = gb.fuse(v2, v3, cfg.graph.fusion,
                            self.params.get("graph.fusion.weights"))

            if cfg.graph.edge_source == "node_features":
                adjacency = gb.adjacency_semantic(fused)
            elif cfg.graph.edge_source == "projection_matrix":
                adjacency = gb.adjacency_from_projection(p)
            else:
                m_c = gb.predict_centroids(p, self.params["graph.centroid.weights"])
                m_g, degenerate = gb.compute_centroids_oracle(
                    p, inputs.scene.depth, inputs.scene.intrinsics, cfg.graph.z_max
                )
                adjacency = gb.adjacency_locality(m_c, cfg.graph.epsilon)
                diagnostics.update(centroids=m_c, centroid_targets=m_g,
                                   degenerate_nodes=degenerate)

            updated = stack_forward(fused, adjacency, self._gnn_stack())
            t_prime = (tc.transpose(self.params["graph.transform2d.weights"])
                       if cfg.tied_reprojection else self.params["reproject.t_prime"])
            x_out = reproject(updated, p, x2,
                              ReprojectionConfig(t_prime=t_prime, residual=cfg.residual))
            diagnostics.update(projection=p, adjacency=adjacency,
                               nodes=fused, nodes_updated=updated)
        else:
            x_out = x2
        logits = tc.conv2d(x_out, self.params["classifier.kernel"])
        logits = tc.upsample_bilinear(logits, FEATURE_STRIDE)
        return logits, diagnostics

    def loss_terms(self, inputs: PreparedScene) -> dict:
        """Forward plus all loss terms; keys total/ce/kl/mse and diagnostics."""
        cfg = self.cfg

        def guarded(stage, fn):
            try:
                return fn()
            except NumericError as exc:
                raise TrainingDivergedError(f"{stage}: {exc}") from exc

        logits, diag = guarded("forward pass", lambda: self.forward(inputs))
        terms = {"diagnostics": diag, "logits": logits}
        terms["ce"] = guarded("cross-entropy term",
                              lambda: cross_entropy(logits, inputs.labels))
        kl = mse = None
        if cfg.graph_enabled:
            kl = guarded("KL uniformity term",
                         lambda: kl_uniformity(diag["projection"], cfg.kl_variant))
            if cfg.graph.edge_source == "centroids":
                mse = guarded("centroid MSE term",
                              lambda: centroid_mse(diag["centroids"],
                                                   diag["centroid_targets"],
                                                   diag["degenerate_nodes"]))
        terms["kl"] = kl
        terms["mse"] = mse
        if kl is None:
            terms["total"] = terms["ce"]
        else:
            terms["total"] = total_loss(terms["ce"], kl, mse, cfg.loss)
        return terms

    def predict(self, inputs: PreparedScene) -> np.ndarray:
        logits, _ = self.forward(inputs)
        return logits.data.argmax(axis=0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        from .checkpoint import diff_parameters
        problems = diff_parameters(
            {n: p.data.shape for n, p in self.params.items()},
            {n: np.asarray(a).shape for n, a in state.items()},
        )
        if problems:
            from .errors import CheckpointMismatchError
            raise CheckpointMismatchError(
                "checkpoint does not match model:\n" + "\n".join(problems)
            )
        for name, arr in state.items():
            self.params[name] = Tensor(arr, requires_grad=True)


def node_usage_entropy(p: ProjectionMatrix) -> float:
    """Entropy of the node-usage marginal; ln N means perfectly balanced."""
    q = p.soft.data.sum(axis=1) / p.num_pixels
    nz = q[q > 0]
    return float(-(nz * np.log(nz)).sum())


def visualize_assignment(p: ProjectionMatrix) -> np.ndarray:
    """Per-pixel max assignment score mapped from [1/N, 1] onto [0, 255]."""
    h, w = p.spatial
    peak = p.scores.data.max(axis=0).reshape(h, w)
    lo = 1.0 / p.num_nodes
    level = np.round((peak - lo) / (1.0 - lo) * 255.0)
    return np.clip(level, 0, 255).astype(np.uint8)


class Adam:
    """Adam with decoupled-free classic L2 (decay folded into the gradient)."""

    def __init__(self, cfg: TrainConfig, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.cfg = cfg
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, model: SegmentationModel) -> None:
        self.t += 1
        lr, wd = self.cfg.learning_rate, self.cfg.weight_decay
        for name in sorted(model.params):
            p = model.params[name]
            g = np.zeros(p.shape) if p.grad is None else p.grad
            g = g + wd * p.data
            m = self.m.setdefault(name, np.zeros(p.shape))
            v = self.v.setdefault(name, np.zeros(p.shape))
            m[:] = self.beta1 * m + (1 - self.beta1) * g
            v[:] = self.beta2 * v + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            if lr != 0.0:
                new = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
                model.params[name] = Tensor(new, requires_grad=True)


@dataclass
class TrainResult:
    history: list[dict]           # per epoch: total/ce/kl/mse means
    entropy_history: list[float]  # index 0 is the pre-training value
    model: SegmentationModel


def _mean_entropy(model: SegmentationModel, prepared: Sequence[PreparedScene]) -> float:
    if not model.cfg.graph_enabled:
        return float("nan")
    values = []
    for item in prepared:
        _, diag = model.forward(item)
        values.append(node_usage_entropy(diag["projection"]))
    return float(np.mean(values))


def train(model: SegmentationModel, prepared: Sequence[PreparedScene],
          cfg: TrainConfig, seed: int = 0,
          progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Seeded, deterministic training; batches average their losses on one tape."""
    if not prepared:
        raise ConfigError("training set is empty")
    rng = np.random.default_rng(seed)
    opt = Adam(cfg)
    history: list[dict] = []
    entropy_history = [_mean_entropy(model, prepared)]

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(prepared))
        sums = {"total": 0.0, "ce": 0.0, "kl": 0.0, "mse": 0.0}
        entropies = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [prepared[i] for i in order[start:start + cfg.batch_size]]
            tape = GradientTape()
            with tape:
                batch_total = None
                for item in batch:
                    terms = model.loss_terms(item)
                    for key in ("total", "ce", "kl", "mse"):
                        t = terms[key]
                        if t is not None:
                            value = t.item()
                            if not math.isfinite(value):
                                raise TrainingDivergedError(
                                    f"{key} loss became non-finite at epoch {epoch}"
                                )
                            sums[key] += value
                    if "projection" in terms["diagnostics"]:
                        entropies.append(
                            node_usage_entropy(terms["diagnostics"]["projection"])
                        )
                    share = tc.mul(terms["total"], 1.0 / len(batch))
                    batch_total = share if batch_total is None else tc.add(batch_total, share)
            for name, p in model.params.items():
                tape.register_parameter(name, p)
            tape.backward(batch_total)
            opt.step(model)
        record = {k: sums[k] / len(prepared) for k in sums}
        record["epoch"] = epoch
        record["entropy"] = float(np.mean(entropies)) if entropies else float("nan")
        history.append(record)
        entropy_history.append(record["entropy"])
        if progress:
            progress(f"epoch {epoch:3d}  total {record['total']:.4f}  "
                     f"ce {record['ce']:.4f}  kl {record['kl']:.4f}  "
                     f"mse {record['mse']:.5f}")
    return TrainResult(history=history, entropy_history=entropy_history, model=model)


def evaluate(model: SegmentationModel, prepared: Sequence[PreparedScene]) -> EvalReport:
    cm = np.zeros((model.cfg.num_classes, model.cfg.num_classes), dtype=np.int64)
    for item in prepared:
        cm += confusion_matrix(model.predict(item), item.labels.values,
                               model.cfg.num_classes)
    return report_from_confusion(cm)
