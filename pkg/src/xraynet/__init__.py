"""From-scratch CNN and linear SVM pipelines for radiograph anatomy classification."""

from .augment import AffineSpec, AugmentConfig, apply_affine, crop_resize, sample_augmentation
from .data import DatasetManifest, FeatureSet, Record, load_feature_set, load_image
from .model import Model, ModelSpec, default_spec, build_model, load_checkpoint, save_checkpoint
from .svm import MulticlassSvm, SvmConfig, grid_search_cv, train_binary, train_ovr
from .trainer import RunHistory, TrainConfig, evaluate, train

__version__ = "0.1.0"
