"""neurotwin: desk-scale EEG monitoring and tumor analytics pipeline.

Subpackages cover the signal chain (synthesis + denoising), per-window
feature extraction, the authenticated fog gate, a small patch transformer
with entropy-regularized attention and adaptive thresholding, a BiLSTM
brain-state classifier, polynomial growth forecasting, and the orchestrator
that wires them into one deterministic, seeded run.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    brainstate,
    features,
    fog,
    kinetics,
    signal_chain,
    svg,
    tensorio,
    twin,
    vit,
)
