"""Dataset distillation into per-class Gaussian latent priors plus a shared decoder."""

from .bundle import DistilledBundle, deserialize_bundle, serialize_bundle
from .datasets import DatasetHandle, PreprocConfig, load_dataset, load_splits, partition_classes
from .decoder import DecoderSpec, preset
from .distiller import DistillConfig, distill
from .evaluation import DownstreamConfig, EvalReport, StorageReport, account_storage, recovery_accuracy
from .federated import AggregatedBundle, FederatedPlan, run_federated

__version__ = "0.1.0"

__all__ = [
    "AggregatedBundle",
    "DatasetHandle",
    "DecoderSpec",
    "DistillConfig",
    "DistilledBundle",
    "DownstreamConfig",
    "EvalReport",
    "FederatedPlan",
    "PreprocConfig",
    "StorageReport",
    "account_storage",
    "deserialize_bundle",
    "distill",
    "load_dataset",
    "load_splits",
    "partition_classes",
    "preset",
    "recovery_accuracy",
    "run_federated",
    "serialize_bundle",
]
