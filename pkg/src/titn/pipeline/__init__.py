from titn.pipeline.data import Dataset, load_cifar, load_mnist, make_synthetic
from titn.pipeline.metrics import MetricsRecord, classification_metrics
from titn.pipeline.optim import SGD, cosine_lr, sgd_step
from titn.pipeline.train import TrainConfig, evaluate, train

__all__ = [
    "Dataset", "load_cifar", "load_mnist", "make_synthetic", "MetricsRecord",
    "classification_metrics", "SGD", "cosine_lr", "sgd_step", "TrainConfig", "evaluate", "train",
]
