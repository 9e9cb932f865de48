"""CNN training and inference engine for adjective-noun-pair image concepts."""

from .data import (AnpVocabulary, ManifestRecord, load_manifest,
                   load_vocabulary, validate_manifest)
from .evaluation import (EvalReport, PredictionMatrix, annotate,
                         average_precision_at_20, evaluate_annotation,
                         retrieval_eval, topk_accuracy)
from .network import (NetworkModel, backward, build, forward, init_finetune,
                      init_scratch, load_weights, save_weights)
from .optim import OptimizerState, TrainConfig, lr_at, sgd_step, train
from .tensor import Gaussian, Rng, Tensor, matmul, reshape, tensor_new

__version__ = "0.1.0"
