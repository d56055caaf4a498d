"""Trainable goal, type and pose stages, the direct heatmap baseline and the semantic scorer."""

from __future__ import annotations

from .encoding import goal_inputs, pose_inputs, render_points, semantic_inputs, type_inputs
from .forward import (
    goal_forward,
    pose_forward,
    predict_goal,
    predict_heatmap,
    predict_pose,
    predict_semantic,
    predict_type,
    type_forward,
)
from .losses import ce_loss_class, ce_loss_grid
from .networks import (
    GoalNet,
    HeatmapBaselineNet,
    NetConfig,
    PoseNet,
    SemanticNet,
    TypeNet,
    build_model,
    make_uniform_,
)
from .training import (
    TrainConfig,
    TrainResult,
    augment_batch,
    fit,
    flip_type_table,
    load_checkpoint,
    module_losses,
    painted_centers,
    save_checkpoint,
    train_module,
    write_loss_curve,
)

GoalModel = GoalNet
TypeModel = TypeNet
PoseModel = PoseNet

__all__ = [
    "GoalModel", "TypeModel", "PoseModel", "GoalNet", "TypeNet", "PoseNet", "HeatmapBaselineNet", "SemanticNet",
    "NetConfig", "TrainConfig", "TrainResult", "build_model", "make_uniform_",
    "goal_forward", "type_forward", "pose_forward", "ce_loss_grid", "ce_loss_class",
    "predict_goal", "predict_type", "predict_pose", "predict_heatmap", "predict_semantic",
    "goal_inputs", "type_inputs", "pose_inputs", "semantic_inputs", "render_points",
    "train_module", "fit", "augment_batch", "flip_type_table", "module_losses", "painted_centers",
    "save_checkpoint", "load_checkpoint", "write_loss_curve",
]
