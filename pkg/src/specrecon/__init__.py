"""Four-level residual network that reconstructs 31-band spectral cubes from RGB images."""
from .data import (
    BANDS, WAVELENGTHS, DegradeConfig, default_response, degrade_real_world, gen_synthetic_scene,
    load_cube, load_dataset, load_response, load_rgb, project, render_rgb, sample_patch,
    save_cube, save_response, save_rgb, synthetic_samples, write_dataset,
)
from .errors import ConfigError, FormatError, PaddingError, ShapeError, SpecReconError, TrainingError
from .metrics import (
    EnsembleSet, LinearBaseline, MetricReport, bpmrae, ensemble_average, evaluate,
    linear_baseline_fit, mrae, rmse,
)
from .model import (
    ArchConfig, ModelParams, ModelReport, hrnet_forward, init_params, load_checkpoint,
    model_report, predict, save_checkpoint, tiny_arch,
)
from .tensor import Tensor, backward, grad_check, no_grad
from .train import FULL_SCALE_CONFIG, TrainConfig, TrainLog, adam_step, load_config, lr_at, train

__version__ = "0.1.0"
