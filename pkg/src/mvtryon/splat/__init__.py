from .fit import FitConfig, FitResult, fit_cloud, view_loss, view_losses
from .gaussians import (
    Gaussian,
    GaussianCloud,
    covariance_from_scale_rot,
    init_cloud_from_scene,
    load_cloud,
    quaternion_to_rotation,
    rotate_cloud,
    save_cloud,
)
from .rasterize import (
    CloudGradients,
    ProjectedGaussian,
    RenderOutput,
    SplatConfig,
    project_cloud,
    project_gaussian,
    render,
    render_grad,
)
