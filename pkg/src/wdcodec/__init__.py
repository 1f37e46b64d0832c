"""Low-complexity perceptual image compression toolkit.

Subpackages cover: the image/tensor substrate (imgsig), multi-scale
feature extraction (features), the texture-statistics distortion metric
(wdmetric), a minimal reverse-mode autodiff engine (autodiff), the
overfitted per-image codec (codec) with its range coder (coder), rating
study statistics (evalstats), the rating HTTP service (raterd), and the
command-line entry point (cli).
"""

__version__ = "0.1.0"
