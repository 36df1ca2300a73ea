"""Online self-supervised instance detection driven by zero-shot 6D pose estimation.

A slow pair-feature pose estimator produces score-gated pseudo-labels that
finetune a fast template-correlation detector online; the detector crops the
pose estimator's search space in return.  Everything runs on synthetic RGB-D
tabletop streams with full ground truth.
"""

__version__ = "0.1.0"
