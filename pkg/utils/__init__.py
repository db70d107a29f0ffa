"""
Utilities package for the Introspect engine.

This package contains the model, data, explanation and scoring modules the
pipeline stages are built from.
"""

__version__ = "0.1.0"

from .transformer import ModelConfig, TokenSeq, Intervention, ResidualTrace, Transformer
from .training import OptimizerConfig, TrainingDivergedError, fine_tune, train_lm
from .vocab import Vocabulary
from .world import World, WorldConfig, gen_world
from .sae import FeatureDirection, SaeConfig, SaeModel, train_sae
from .projection import ProjectionSet, pretrain_projection
from .feature_desc import ActivationCorpus, LabelGrammar, describe, label_feature
from .act_patch import generate_patch_samples, patch_outcome, decode_location
from .input_ablate import generate_ablate_samples, ablation_outcome, inject_hint
from .baselines import FeatureIndex, selfie_describe, zero_shot_branch
from .metrics import ScoreReport, has_changed_f1, paired_t_test, pearson
from .config import RunConfig, load_config
from .manifest import ArtifactIntegrityError, ArtifactStore, MissingArtifactError, StageOrderError

__all__ = [
    '__version__',
    'ModelConfig',
    'TokenSeq',
    'Intervention',
    'ResidualTrace',
    'Transformer',
    'OptimizerConfig',
    'TrainingDivergedError',
    'fine_tune',
    'train_lm',
    'Vocabulary',
    'World',
    'WorldConfig',
    'gen_world',
    'FeatureDirection',
    'SaeConfig',
    'SaeModel',
    'train_sae',
    'ProjectionSet',
    'pretrain_projection',
    'ActivationCorpus',
    'LabelGrammar',
    'describe',
    'label_feature',
    'generate_patch_samples',
    'patch_outcome',
    'decode_location',
    'generate_ablate_samples',
    'ablation_outcome',
    'inject_hint',
    'FeatureIndex',
    'selfie_describe',
    'zero_shot_branch',
    'ScoreReport',
    'has_changed_f1',
    'paired_t_test',
    'pearson',
    'RunConfig',
    'load_config',
    'ArtifactIntegrityError',
    'ArtifactStore',
    'MissingArtifactError',
    'StageOrderError',
]
