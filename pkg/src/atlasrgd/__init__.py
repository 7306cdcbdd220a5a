"""Manifold atlases built from mixtures of invertible-chart VAEs, with
Riemannian gradient descent for manifold-constrained inverse problems."""

from .autodiff import Var, backward, forward_record
from .chart import (ChartVAE, latent_ppf, log_p_latent, make_image_chart,
                    make_toy_chart, sample_latent)
from .checkpoint import load_checkpoint, save_checkpoint
from .flows import CouplingBlock, InvertibleNet
from .mixture import (MixtureAtlas, TrainConfig, build_atlas, load_atlas,
                      save_atlas, train)
from .optim import ParamStore, adam_step
from .problems import (BarImageSpec, BlurOperator, ToyManifoldSpec, psnr,
                       render_bar, sample_bars, sample_toy, toy_objective)
from .riemann import (DescentState, SingularFrameError, TangentFrame,
                      chart_jacobian, descent_loop, descent_step,
                      retract_coords, retract_project, riemannian_grad,
                      tangent_frame)
from .rng import stream

__version__ = "0.1.0"

__all__ = [
    "Var", "backward", "forward_record",
    "ChartVAE", "latent_ppf", "log_p_latent", "make_image_chart",
    "make_toy_chart", "sample_latent",
    "load_checkpoint", "save_checkpoint",
    "CouplingBlock", "InvertibleNet",
    "MixtureAtlas", "TrainConfig", "build_atlas", "load_atlas", "save_atlas",
    "train",
    "ParamStore", "adam_step",
    "BarImageSpec", "BlurOperator", "ToyManifoldSpec", "psnr", "render_bar",
    "sample_bars", "sample_toy", "toy_objective",
    "DescentState", "SingularFrameError", "TangentFrame", "chart_jacobian",
    "descent_loop", "descent_step", "retract_coords", "retract_project",
    "riemannian_grad", "tangent_frame",
    "stream",
]
