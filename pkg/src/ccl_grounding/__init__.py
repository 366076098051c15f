"""Semi-supervised video paragraph grounding with context consistency learning."""
from .estimators import CCLGrounder, MeanTeacherGrounder, SupervisedGrounder, check_paragraph_inputs
from .evaluation import evaluate
from .experiment import ExperimentConfig, load_config, run_experiment
from .model import GroundingModel, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .pseudo_labeling import Stage2Config, context_consistency, generate_pseudo_labels
from .stage1 import Stage1Config, train_stage1
from .synthetic_data import SyntheticConfig, generate_dataset, load_dataset, save_dataset
from .temporal_math import Interval, giou, iou, location_loss, mean_iou, recall_at

__version__ = "0.1.0"
