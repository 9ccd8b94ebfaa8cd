"""Continual domain expansion for absolute pose regression, on synthetic scenes.

A deployed pose regressor is updated round by round with unlabeled scans
that a scene-agnostic teacher pseudo-labels, under a fixed per-image
compute budget and a bounded replay buffer.
"""
from .continual import (ConDo, ReplayBuffer, RetrainGT, RetrainTeacher, StandAlonePerScene, TeacherSpec,
                        TrainConfig, TrainOnly, compute_b, reservoir_insert, round_iterations, run_round,
                        run_strategy, sample_batch)
from .geometry import Pose, compose, orientation_error_deg, perturb_pose, position_error, relative
from .harness import ExperimentConfig, MetricsReport, emit_report, evaluate, run_experiment, teacher_sweep
from .model import AprModel, add_head, forward, gradient_check, init_model, pose_loss
from .teachers import OdometryTeacher, OracleTeacher, RetrievalTeacher, label_scan
from .world import Benchmark, BenchmarkConfig, build_benchmark, make_scene, render

__all__ = [
    "AprModel", "Benchmark", "BenchmarkConfig", "ConDo", "ExperimentConfig", "MetricsReport", "OdometryTeacher",
    "OracleTeacher", "Pose", "ReplayBuffer", "RetrainGT", "RetrainTeacher", "RetrievalTeacher", "StandAlonePerScene",
    "TeacherSpec", "TrainConfig", "TrainOnly", "add_head", "build_benchmark", "compose", "compute_b",
    "emit_report", "evaluate", "forward", "gradient_check", "init_model", "label_scan", "make_scene",
    "orientation_error_deg", "perturb_pose", "pose_loss", "position_error", "relative", "render",
    "reservoir_insert", "round_iterations", "run_experiment", "run_round", "run_strategy", "sample_batch",
    "teacher_sweep",
]
