"""Desk-scale diffusion video inpainting.

Pixel-space forward/reverse diffusion, a pseudo-3D denoiser with temporal
motion modules and reference-frame attention guidance, a structure-guidance
control branch, windowed any-length sampling, staged training on synthetic
clips, evaluation metrics and a runtime-scaling benchmark.
"""

from .conditioning import (ConditionSet, MaskSequence, VideoTensor, embed_text,
                           make_condition, validate_mask_sequence)
from .denoiser import (AttentionGuidanceState, DenoiserConfig, eval_params,
                       forward, guided_spatial_attention, init_denoiser_weights,
                       inject_structure, set_trainable, temporal_attention,
                       weight_groups)
from .diffusion import (NoiseSchedule, SamplerConfig, build_schedule, cfg_combine,
                        composite_final, ddim_step, ddpm_step, predicted_x0,
                        q_sample)
from .evalbench import (BenchProbe, MetricReport, ScalingReport,
                        background_preservation, complexity_benchmark,
                        temporal_consistency)
from .sampler import (GuidanceConfig, SamplingRequest, SegmentPlan, aggregate,
                      plan_segments, sample_direct, sample_video)
from .structure import (StructureFeatures, StructureMap, control_forward,
                        extract_structure, init_control_weights, scale_features)
from .tensor import (Tensor, backward, concat, conv2d, group_norm,
                     scaled_dot_attention, silu, sinusoidal_encoding, softmax)
from .training import (SyntheticSample, TrainConfig, gen_random_mask,
                       gen_synthetic_dataset, inpaint_loss, structure_loss,
                       train_stage)
from .weights_io import load_weights, save_weights

__version__ = "0.1.0"
