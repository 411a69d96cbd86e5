"""Cross-modal contrastive recommendation with false-negative masking and
hyperspherical debiasing on collaborative-filtering graphs."""

__version__ = "0.1.0"
