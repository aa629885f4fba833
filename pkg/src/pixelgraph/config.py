"""Plain-text ``key value`` configuration covering model and training fields."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError
from .graph_build import GraphBuildConfig
from .losses import LossWeights
from .pipeline import GnnSpec, ModelConfig, TrainConfig


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_widths(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


_SCHEMA = {
    "image_size": int,
    "num_classes": int,
    "widths_2d": _parse_widths,
    "widths_3d": _parse_widths,
    "input_3d": str,
    "graph_enabled": _parse_bool,
    "num_nodes": int,
    "node_dim": int,
    "assignment": str,
    "edge_source": str,
    "fusion": str,
    "epsilon": float,
    "z_max": float,
    "gnn_layer_type": str,
    "gnn_layers": int,
    "gnn_aggregation": str,
    "residual": _parse_bool,
    "tied_reprojection": _parse_bool,
    "alpha": float,
    "beta": float,
    "kl_variant": str,
    "learning_rate": float,
    "weight_decay": float,
    "batch_size": int,
    "epochs": int,
}


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ConfigError(f"line {lineno}: expected 'key value', got {line!r}")
        key, raw = parts
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _SCHEMA[key](raw)
    return build_configs(values)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config_text(Path(path).read_text())


def build_configs(values: dict) -> tuple[ModelConfig, TrainConfig]:
    def pick(key, default):
        return values.get(key, default)

    graph = GraphBuildConfig(
        num_nodes=pick("num_nodes", 8),
        node_dim=pick("node_dim", 16),
        assignment=pick("assignment", "soft"),
        edge_source=pick("edge_source", "centroids"),
        fusion=pick("fusion", "sum"),
        epsilon=pick("epsilon", 1e-6),
        z_max=pick("z_max", 10.0),
    )
    model = ModelConfig(
        image_size=pick("image_size", 64),
        num_classes=pick("num_classes", 6),
        widths_2d=pick("widths_2d", (16, 32, 64)),
        widths_3d=pick("widths_3d", (8, 16, 32)),
        input_3d=pick("input_3d", "normal"),
        graph_enabled=pick("graph_enabled", True),
        graph=graph,
        gnn=GnnSpec(
            layer_type=pick("gnn_layer_type", "graph_convolution"),
            num_layers=pick("gnn_layers", 1),
            aggregation=pick("gnn_aggregation", "sum"),
        ),
        residual=pick("residual", True),
        tied_reprojection=pick("tied_reprojection", False),
        loss=LossWeights(alpha=pick("alpha", 0.1), beta=pick("beta", 0.1)),
        kl_variant=pick("kl_variant", "marginal"),
    )
    training = TrainConfig(
        learning_rate=pick("learning_rate", 0.01),
        weight_decay=pick("weight_decay", 2e-4),
        batch_size=pick("batch_size", 4),
        epochs=pick("epochs", 30),
    )
    return model, training


def render_config_text(model: ModelConfig, training: TrainConfig) -> str:
    lines = [
        f"image_size {model.image_size}",
        f"num_classes {model.num_classes}",
        "widths_2d " + ",".join(str(w) for w in model.widths_2d),
        "widths_3d " + ",".join(str(w) for w in model.widths_3d),
        f"input_3d {model.input_3d}",
        f"graph_enabled {str(model.graph_enabled).lower()}",
        f"num_nodes {model.graph.num_nodes}",
        f"node_dim {model.graph.node_dim}",
        f"assignment {model.graph.assignment}",
        f"edge_source {model.graph.edge_source}",
        f"fusion {model.graph.fusion}",
        f"epsilon {model.graph.epsilon!r}",
        f"z_max {model.graph.z_max!r}",
        f"gnn_layer_type {model.gnn.layer_type}",
        f"gnn_layers {model.gnn.num_layers}",
        f"gnn_aggregation {model.gnn.aggregation}",
        f"residual {str(model.residual).lower()}",
        f"tied_reprojection {str(model.tied_reprojection).lower()}",
        f"alpha {model.loss.alpha!r}",
        f"beta {model.loss.beta!r}",
        f"kl_variant {model.kl_variant}",
        f"learning_rate {training.learning_rate!r}",
        f"weight_decay {training.weight_decay!r}",
        f"batch_size {training.batch_size}",
        f"epochs {training.epochs}",
    ]
    return "\n".join(lines) + "\n"


def default_configs() -> tuple[ModelConfig, TrainConfig]:
    return build_configs({})


def grad_check_configs(size: int = 8) -> tuple[ModelConfig, TrainConfig]:
    """Small widths so the exhaustive per-coordinate check stays fast."""
    return build_configs({
        "image_size": size,
        "widths_2d": (6, 8, 12),
        "widths_3d": (4, 6, 8),
        "num_nodes": 4,
        "node_dim": 8,
    })


# Ablation arms: Table-style switches exposed as name=value tokens.
_ABLATION_KEYS = {
    "assignment": {"soft": ("assignment", "soft"), "hard": ("assignment", "hard")},
    "kl": {"on": ("alpha", 0.1), "off": ("alpha", 0.0)},
    "edges": {
        "v": ("edge_source", "node_features"),
        "p": ("edge_source", "projection_matrix"),
        "centroid": ("edge_source", "centroids"),
    },
    "gnn": {
        "reasoning": ("gnn_layer_type", "graph_reasoning"),
        "gcn": ("gnn_layer_type", "graph_convolution"),
    },
    "fusion": {"sum": ("fusion", "sum"), "cat": ("fusion", "concat")},
    "input3d": {"depth": ("input_3d", "depth"), "normal": ("input_3d", "normal")},
}


def apply_ablation(model: ModelConfig, training: TrainConfig, arm: str
                   ) -> tuple[ModelConfig, TrainConfig, list[str]]:
    """Apply a comma-separated ablation arm; returns configs plus warnings."""
    values = _config_to_values(model, training)
    warnings: list[str] = []
    for token in arm.split(","):
        token = token.strip()
        if not token:
            continue
        if token == "baseline":
            values["graph_enabled"] = False
            continue
        if token == "full":
            values["graph_enabled"] = True
            continue
        if "=" not in token:
            raise ConfigError(f"ablation token {token!r} is not name=value")
        key, choice = token.split("=", 1)
        if key not in _ABLATION_KEYS or choice not in _ABLATION_KEYS[key]:
            raise ConfigError(f"unknown ablation switch {token!r}")
        field, value = _ABLATION_KEYS[key][choice]
        values[field] = value
    if values["edge_source"] == "centroids" and values["beta"] == 0.0:
        warnings.append("edges=centroid with beta=0: centroid regressor is unsupervised")
    if values["edge_source"] != "centroids" and values["beta"] != 0.0:
        warnings.append("beta is ignored: the centroid MSE term only exists for "
                        "edge_source=centroids")
    new_model, new_training = build_configs(values)
    return new_model, new_training, warnings


def _config_to_values(model: ModelConfig, training: TrainConfig) -> dict:
    return {
        "image_size": model.image_size,
        "num_classes": model.num_classes,
        "widths_2d": model.widths_2d,
        "widths_3d": model.widths_3d,
        "input_3d": model.input_3d,
        "graph_enabled": model.graph_enabled,
        "num_nodes": model.graph.num_nodes,
        "node_dim": model.graph.node_dim,
        "assignment": model.graph.assignment,
        "edge_source": model.graph.edge_source,
        "fusion": model.graph.fusion,
        "epsilon": model.graph.epsilon,
        "z_max": model.graph.z_max,
        "gnn_layer_type": model.gnn.layer_type,
        "gnn_layers": model.gnn.num_layers,
        "gnn_aggregation": model.gnn.aggregation,
        "residual": model.residual,
        "tied_reprojection": model.tied_reprojection,
        "alpha": model.loss.alpha,
        "beta": model.loss.beta,
        "kl_variant": model.kl_variant,
        "learning_rate": training.learning_rate,
        "weight_decay": training.weight_decay,
        "batch_size": training.batch_size,
        "epochs": training.epochs,
    }
