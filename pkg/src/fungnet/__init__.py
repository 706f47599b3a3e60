"""CNN pipeline for classifying mushroom photos as edible or poisonous."""
from .tensor import Tape, Tensor, backward, grad_check, matmul, tensor_from
from .models import apply_weights, build_model, count_params, forward
from .metrics import MetricsReport, PredictionSet, auc, emit_report

__version__ = "0.1.0"
