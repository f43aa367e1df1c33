"""Gaussian moment propagation ("stochastic feedforward") for small CNNs."""
from .gaussmath import (DEFAULT_REG, GaussMoments, RegularizationConstants, censored_relu_moments,
                        inverse_mills, pairwise_max_moments, std_normal_cdf, std_normal_pdf)
from .network import (Model, PredictionOutcome, PreprocessSpec, backward_input_gradient, forward_det,
                      forward_stochastic, load_model, load_model_files, predict_ensemble, save_model,
                      save_model_files)
from .tensorcore import MomentTensor, lift_to_moments, tensor_new

__version__ = "0.1.0"
