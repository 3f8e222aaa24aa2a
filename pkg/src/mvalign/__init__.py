"""Coarse-to-fine multi-view face alignment on a small reverse-mode autodiff core.

Set ``MVALIGN_NUMBA=0`` before import to run the pure-numpy kernels.
"""
from .alignment import FitResult, fit, normalize_face, select_view
from .config import load_config
from .geometry import Box, LandmarkSet, SimilarityTransform, estimate_similarity
from .heatmap import decode_peaks, render_heatmaps
from .metrics import ced_auc_fr, nme
from .networks import HourglassConfig, MultiViewHourglass, load_checkpoint, save_checkpoint
from .pipeline import CascadeConfig, Models, TrackerConfig, detect, track, track_step
from .tensor import Tensor, no_grad

__all__ = ["Box", "CascadeConfig", "FitResult", "HourglassConfig", "LandmarkSet", "Models", "MultiViewHourglass",
           "SimilarityTransform", "Tensor", "TrackerConfig", "ced_auc_fr", "decode_peaks", "detect",
           "estimate_similarity", "fit", "load_checkpoint", "load_config", "nme", "no_grad", "normalize_face",
           "render_heatmaps", "save_checkpoint", "select_view", "track", "track_step"]
