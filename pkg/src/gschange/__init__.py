"""Object-level 3D change detection and continual updates for Gaussian-splat scenes."""

from .scene import (Gaussian3D, GaussianScene, PinholeCamera, CameraSet,
                    load_scene, save_scene, load_cameras, save_cameras)
from .images import ImageBuffer, save_png, load_png, save_fimg, load_fimg
from .render import (Projected2D, ContributionRecord, RenderGradients,
                     project_gaussian, render, render_with_contributions,
                     render_gradients, masked_loss)

__version__ = "0.1.0"
