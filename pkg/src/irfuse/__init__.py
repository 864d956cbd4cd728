"""Few-shot segmentation of infrared images with translated lightness and RGB auxiliaries."""

from .dataset import DatasetError, load_dataset, make_eval_view, make_folds, make_view, sample_episode
from .evaluation import MetricsReport, fold_metrics, multi_seed_evaluate, render_report
from .fss import FSSModel, ModelConfig, count_parameters, load_model, save_model
from .train import TrainConfig, loss_total, train_base_stage, train_meta_stage
from .translate import AdversarialTranslator, NoiseSchedule, TranslatorConfig, train_translator, translate

__version__ = "0.1.0"
