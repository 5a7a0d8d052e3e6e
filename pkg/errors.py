"""
-----------------------------------------------------------------------------------
Description: exceptions raised across ingest, training, clustering & evaluation
"""


class LabelCleanError(Exception):
    """Root of every error raised by this package."""


class ArgumentError(LabelCleanError, ValueError):
    pass


class FormatError(LabelCleanError, ValueError):
    pass


class TruncationError(FormatError):
    pass


class ConsistencyError(LabelCleanError, ValueError):
    pass


class ShapeError(LabelCleanError, ValueError):
    pass


class StateError(LabelCleanError, RuntimeError):
    pass


class NumericError(LabelCleanError, ArithmeticError):
    pass


class DegenerateError(LabelCleanError, ValueError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, epoch, budget=None, message='non-finite loss'):
        self.epoch = epoch
        self.budget = budget
        text = f'training diverged at epoch {epoch}: {message}'
        if budget is not None:
            text += f' (epoch budget {budget})'
        super().__init__(text)


class MissingArtifactError(LabelCleanError):
    def __init__(self, path, hint=''):
        self.path = str(path)
        text = f'missing upstream artifact: {self.path}'
        if hint:
            text += f' ({hint})'
        super().__init__(text)


class ArtifactIOError(LabelCleanError, OSError):
    def __init__(self, path, cause):
        self.path = str(path)
        super().__init__(f'I/O failure on {self.path}: {cause}')
