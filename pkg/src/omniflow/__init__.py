"""Unified video generation and editing at toy scale.

Condition sequences from a prompt reasoner, caption and instruction
encoders and a reference latent feed a two-expert diffusion transformer
trained by flow matching. Sequence-parallel attention runs on a simulated
worker fabric, and a four-stage pipeline cleans synthetic training data.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import (
    ConditionBundle,
    ConditionSources,
    DropoutConfig,
    DropoutMasks,
    apply_condition_dropout,
    build_condition_sequence,
    select_tokens,
)
from .config import ExperimentConfig
from .dit import DiTConfig, DiTParams, ExpertRouter, LatentGrid, init_dit_params, model_forward, route_expert
from .estimators import CleaningPipeline, ConditionEncoder, FlowMatchingGenerator
from .exceptions import (
    ExhaustedDataError,
    ManifestError,
    RejectedInputError,
    SamplerDivergenceError,
    TrainingDivergenceError,
)
from .flow import SamplerConfig, euler_sample, flow_loss, sample_path, train_step
from .prompt_reasoner import EditInstruction, MockPromptReasoner, SourceDescriptor, TargetCaption
from .seq_parallel import WorkerFabric, comm_volume_model, sp_cross_attention, sp_self_attention
from .tensor_core import Rng

__version__ = "0.1.0"
