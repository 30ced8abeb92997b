"""Continual self-supervised pretraining with a clustered rehearsal buffer.

Three stages: masked-autoencoder pretraining on a first domain, selection of a
rehearsal buffer by clustering first-domain embeddings, and continual
pretraining on a second domain with mixup and stop-gradient feature
distillation on the replayed samples.
"""

from .errors import CheckpointError, InvalidArgument, MissingArtifact, TrainingDiverged

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "InvalidArgument",
    "MissingArtifact",
    "TrainingDiverged",
]
