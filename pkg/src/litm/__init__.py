"""Incremental triplet-margin metric learning on synthetic identity data."""
from .errors import LitmError
from .numeric import RandomSource, pairwise_distances, squared_euclidean
from .model import (GAP, GMP, ModelConfig, Sample, StageEmbeddings, backward, forward,
                    forward_batch, init_params, load_checkpoint, pool, save_checkpoint)
from .losses import MarginSchedule, Triplet, joint_loss, margins, triplet_loss
from .mining import (BatchSpec, GhisConfig, SamplerMode, batch_hard_triplets,
                     epoch_sampler_schedule, ghis_batch, ghis_groups, mean_distance_matrix,
                     random_pk_batch)
from .trainer import TrainConfig, adam_step, lr_at, train
from .evaluation import RetrievalSplit, cmc_map, pair_distance_stats, rank_gallery
from .data import Dataset, SynthConfig, generate

__version__ = "0.1.0"
