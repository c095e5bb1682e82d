from .model import (
    ConfigurationError,
    FeatureSpec,
    GVPScorer,
    build_scorer,
    featurize,
    forward,
    forward_many,
    predicted_label,
    softmax,
)
from .train import EpochMetrics, TrainConfig, evaluate_accuracy, loss_and_grad, train_res
