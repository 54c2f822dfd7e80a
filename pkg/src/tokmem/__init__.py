"""Tokenized procedural memory on a small frozen transformer."""
from .errors import *  # noqa: F401,F403
from .layout import (
    INFIX,
    PREFIX,
    ProcedurePair,
    TrainingSequence,
    build_infix_sequence,
    build_memorization_sequence,
    build_plain_sequence,
    build_prefix_sequence,
    collate,
    parse_infix,
)
from .memory import MemoryBank, create_bank, extend_bank, read_bank, reference_norm, renormalize, write_bank
from .metrics import (
    ForgettingMatrix,
    MetricsReport,
    PPLCurve,
    call_f1,
    exact_match,
    forgetting_matrix,
    perplexity,
    rouge_l,
    routing_accuracy,
    steps_at_target,
)
from .model import (
    AdapterSet,
    Backbone,
    GenerationTrace,
    ModelConfig,
    backbone_checksum,
    forward,
    generate,
    generate_batch,
    init_backbone,
    load_checkpoint,
    loss_and_grad,
    merge_adapters,
    save_checkpoint,
)
from .optim import AdamWState, OptimHyper, adamw_step
from .trainer import AdaptationConfig, ContinualSchedule, ReplayBuffer, RunResult, TrainOptions, adaptation_phase, continual_evaluate, replay_mix, train_run

__version__ = "0.1.0"
