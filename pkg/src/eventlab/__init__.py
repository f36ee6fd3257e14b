"""Benchmark harness for event-camera place recognition and SLAM evaluation."""

from .events import EventStream, SceneTexture, load_events, save_events, synth_traverse
from .frames import (FrameAccumulator, FrameStack, aggregate_mean, export_frames,
                     generate_fixed_count, generate_fixed_window, generate_matched, import_frames,
                     subsample_by_time)
from .ground_truth import (GroundTruthMatrix, PlaceIndex, build_gt_position, build_gt_time,
                           gt_tolerance_in_places)
from .slam import Trajectory, TrajectoryAligner, align_se3, associate, eval_trials, rmse_ate
from .vpr import (DenseSAD, DistanceMatrix, PlaceMatcher, SparseSAD, describe_dense,
                  describe_sparse, distance_matrix, pr_auc, pr_curve, recall_at_k,
                  select_active_pixels)
from .wta import wta_adjust, wta_adjust_by_time, wta_sweep

__version__ = "0.1.0"
