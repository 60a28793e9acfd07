from .augment import AUGMENTATIONS, ViewParams, apply_view, augment_views, sample_view_params, translate
from .generate import (
    SynthesisConfig,
    SynthesisTrajectory,
    full_prompt,
    generate,
    step_seed,
    synthesis_loss,
    synthesis_step,
)
from .gmm import GmmInitializer, downsample, fit_gmm, sample_and_select, sample_candidates, score_candidates

__all__ = [
    "AUGMENTATIONS",
    "GmmInitializer",
    "SynthesisConfig",
    "SynthesisTrajectory",
    "ViewParams",
    "apply_view",
    "augment_views",
    "downsample",
    "fit_gmm",
    "full_prompt",
    "generate",
    "sample_and_select",
    "sample_candidates",
    "sample_view_params",
    "score_candidates",
    "step_seed",
    "synthesis_loss",
    "synthesis_step",
    "translate",
]
