"""Multi-modal stress detection from wearable sensor streams.

Late-fusion recurrent encoders with attention pooling, an inter-modality
contrastive objective, Gaussian-smoothed self-report labels, and a synthetic
cohort generator, all on a small numpy reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
