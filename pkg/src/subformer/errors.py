"""Exception types shared across the package."""


class SubformerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SubformerError):
    """A configuration violates one of its invariants."""


class DimensionError(SubformerError):
    """Tensor shapes are incompatible for the requested operation."""


class VocabError(SubformerError):
    """A token id falls outside the vocabulary."""


class LengthError(SubformerError):
    """A sequence exceeds the model's maximum length."""


class ContractError(SubformerError):
    """An API was called in a way that violates its contract."""


class DataError(SubformerError):
    """A dataset is unreadable or unusable."""


class DegenerateBatchError(DataError):
    """A loss was requested over a batch with no non-pad positions."""


class CheckpointError(SubformerError):
    """A checkpoint file is corrupt or structurally incompatible."""


class DivergenceError(SubformerError):
    """Training produced a non-finite loss."""

    def __init__(self, step, lr, grad_norm):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3e}, grad_norm={grad_norm:.3e})"
        )
