"""Score-guided adversarial diffusion sampling at desk scale.

The library couples a reverse diffusion process with target-similarity
guidance: an adaptively weighted ensemble of surrogate image encoders
supplies a clipped gradient that tilts the score at every denoising step,
while activation-map-guided masking keeps salient regions close to the
original. Ships with purification defenses, quality/transfer metrics, a
procedural toy dataset, and a reproducible experiment runner.
"""

from .atns import AtnsFormatError, read_atns, write_atns
from .attack import (AttackConfig, AttackResult, StepRecord,
                     guided_diffusion_attack, mifgsm_ensemble_attack,
                     trace_to_csv)
from .cam_mask import (ClassifierModel, MaskConfig, blend, cam_to_prob,
                       gradcam, load_classifier, sample_centers, sample_mask,
                       save_classifier, train_classifier)
from .data import N_CLASSES, ToyDataset, gen_toy_dataset, render_image
from .defenses import (DefenseConfig, apply_defense, bit_reduction, diffpure,
                       jpeg_compress)
from .diffusion import (DenoiserModel, GaussianOracle, NoiseSchedule,
                        analytic_eps, ddim_step, ddpm_step, eps_to_score,
                        forward_noise, load_denoiser, make_linear_schedule,
                        reverse_ddpm, save_denoiser, train_denoiser,
                        validation_loss)
from .encoders import (Encoder, EncoderEnsemble, EnsembleConfig,
                       build_ensemble, cosine, load_encoder, save_encoder)
from .ensemble_grad import (GuidanceState, adaptive_weights, compose_score,
                            ensemble_objective, estimate_gradient,
                            target_embeddings)
from .imaging import ImageFormatError, load_image, save_image
from .metrics import (EvalReport, build_prototypes, embed_asr, lp_norms,
                      psnr, ssim, transfer_similarity)
from .runner import (ExperimentConfig, build_context, fit_oracle,
                     run_experiment)
from .tensor import (NonFiniteError, ShapeError, Tensor, TraceError, backward,
                     default_dtype, finite_diff_check, get_default_dtype,
                     set_default_dtype)

__version__ = "0.1.0"
