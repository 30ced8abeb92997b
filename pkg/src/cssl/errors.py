class InvalidArgument(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite.

    ``checkpoint`` points at the diagnostic snapshot written before raising,
    or is None when no output directory was given.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class MissingArtifact(FileNotFoundError):
    """An upstream run artifact is absent; ``producer`` names the CLI step that makes it."""

    def __init__(self, path, producer):
        super().__init__(f"missing {path}; run `cssl {producer}` first")
        self.path = path
        self.producer = producer
