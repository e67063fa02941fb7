"""Uncertainty-aware tomographic reconstruction toolkit.

Learns a conditional sampler for the posterior of an image given noisy
projection data (a conditional VAE around an unrolled refiner), alongside
classical and ensemble baselines and uncertainty evaluation utilities.
"""

__version__ = "0.1.0"

from .baselines import (MlemConfig, TvConfig, lgd_reconstruct, lgd_train,
                        make_gm3_bundle, make_lgd_bundle, mlem, gm3_predict,
                        gm3_train, tv_reconstruct)
from .cvae import (LatentGaussian, ModelBundle, decode, kl_diag_gauss,
                   load_bundle, loss_minibatch, make_bundle, recurrent_step,
                   sample_latent, save_bundle, student_encode, teacher_encode)
from .metrics import compare_methods, hpd_band, psnr, ssim
from .phantoms import (Phantom, StreamConfig, TrainingTuple,
                       generate_ellipse_phantom, insert_tumour,
                       load_phantom_file, make_training_stream, poissonize)
from .posterior import PosteriorSummary, estimate_stats, sample_posterior
from .radon import LinearOperator, OperatorGeometry, default_num_bins, estimate_norm, make_radon
from .toy2d import (MixtureSpec, histogram_distance, ring_mixture,
                    sample_mixture, toy_sample, toy_train)
from .training import TrainConfig, TrainingDiverged, train
