"""smokediff: conditional denoising-diffusion prediction of 2D smoke flows.

The package spans the whole pipeline: a MAC-grid incompressible solver that
generates training trajectories, a small autodiff tensor core, a conditional
U-Net noise predictor, the diffusion schedule/sampler, Adam training with
cosine decay, dataset/checkpoint formats, and MAE/RMSE evaluation. The
convolution hot kernels run either through a compiled Cython extension or a
numpy fallback, selected at import (see smokediff.kernels).
"""

__version__ = "0.1.0"

from smokediff.kernels import active_backend  # noqa: F401
