"""gsavatar: feed-forward animatable 3D-Gaussian avatars.

Triplane-sampled features are decoded into 3D Gaussians and animated by
per-Gaussian feature-space deformation conditioned on 1D motion codes.
"""

from . import autodiff
from .autodiff import Tensor, Tape, no_grad
from .cameras import Camera
from .triplane import Triplane
from .gaussians import DecoderPhi, GaussianSet, covariance, decode
from .sampler import SamplingConfig, instantiate, canonical_frontal_camera
from .rasterizer import rasterize, rasterize_reference, ImageBuffer
from .motion import MotionDecoderPsi, AvatarState, animate, animate_spatial

__version__ = "0.1.0"
