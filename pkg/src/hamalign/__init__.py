"""hamalign: hybrid-attention adversarial feature alignment at desk scale.

A small float64 reverse-mode autodiff engine, the split/shuffle coordinate
attention and level attention stack, gradient-reversal adversarial training
with a single discriminator, a Hungarian set-prediction loss, a toy
transformer detector, and a synthetic two-domain experiment harness.
"""

from .adversarial import (Discriminator, GrlConfig, Sgd, adversarial_loss,
                          discriminator_forward, train_step)
from .checkpoint import read_checkpoint, write_checkpoint
from .config import TrainConfig
from .detection import (Assignment, BoxPrediction, GroundTruthObject, box_iou,
                        detection_loss, hungarian_assign, pairwise_cost)
from .detector import BackboneNet, DecoderHead, EncoderNet, sinusoidal_encoding_2d
from .ham import (CamParams, HamConfig, HamParams, LamParams, cam_forward,
                  channel_attention, ham_forward, lam_forward, spatial_attention,
                  split_groups)
from .metrics import MetricsRecord, average_precision, evaluate_ap
from .model import DetectorModel
from .rasters import dump_attention, read_pgm, write_pgm
from .rng import CounterRng
from .scenes import GeneratorConfig, gen_domain_batch, gen_eval_batch
from .tensor import (ConfigurationError, DimensionError, Tensor, backward,
                     channel_shuffle, conv2d, global_avg_pool, grad_check, grl,
                     group_norm, no_grad, softmax_axis)
from .training import ablate, sweep_k, train, train_probe

__version__ = "0.1.0"
