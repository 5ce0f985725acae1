"""Structured Koopman-generator neural operator for 2D periodic PDEs.

The package learns a linear latent evolution z(t) = exp(L t) z0 per retained
Fourier mode, with the generator decomposed into a shared skew-symmetric
coupling matrix and a positive, wavenumber-dependent diagonal damping. On top
of the model sit desk-scale PDE data generators, a training loop, and the
spectral diagnostics (dispersion branches, dissipation scaling, universality
comparisons, rollouts, timing).
"""

from lgnk.numkern import (
    DegenerateFit,
    EigenSet,
    LinFit,
    NoConvergence,
    eig,
    expm,
    expm_adjoint,
    fft2,
    linfit,
    singvals,
)
from lgnk.generator import GeneratorParams, ModeGrid, build_skew, propagate, spectrum
from lgnk.model import Model, ModelConfig, ModelParams, forward, init_model, load_checkpoint, save_checkpoint
from lgnk.datagen import Dataset, FHNParams, NSParams, gen_fitzhugh_nagumo, gen_navier_stokes
from lgnk.train import TrainConfig, relative_l2, train_loop, transfer_finetune
from lgnk.estimator import KoopmanGeneratorRegressor

__version__ = "0.1.0"
