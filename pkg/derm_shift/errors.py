__all__ = (
    'DermShiftError ConfigError DataError SchemaError EmptyInputError '
    'InvalidIdError ShapeError UndiagnosableCaseError '
    'UnsupportedTargetError UnsupportedFitError DivergenceError '
    'PartialCompletionError').split()


class DermShiftError(Exception):
    """
    Base of all errors raised by this package.
    The ``exitCode`` is what the command line tool exits with.
    """
    exitCode = 2


class ConfigError(DermShiftError, ValueError):
    exitCode = 1


class DataError(DermShiftError):
    exitCode = 2


class SchemaError(DataError, ValueError):
    """
    A dataset, case or metadata value violates the schema.
    """
    def __init__(self, msg, caseId=None, field=None):
        where = []
        if caseId is not None:
            where.append(f'case {caseId}')
        if field is not None:
            where.append(f'field {field}')
        if where:
            msg = f'{msg} ({", ".join(where)})'
        DataError.__init__(self, msg)
        self.caseId = caseId
        self.field = field


class EmptyInputError(DataError, ValueError):
    pass


class InvalidIdError(DataError, IndexError):
    pass


class ShapeError(DataError, ValueError):
    pass


class UndiagnosableCaseError(DataError):
    pass


class UnsupportedTargetError(DataError):
    pass


class UnsupportedFitError(DataError):
    pass


class DivergenceError(DermShiftError, ArithmeticError):
    exitCode = 3

    def __init__(self, step, loss):
        DermShiftError.__init__(
            self, f'Non-finite loss {loss} at step {step}')
        self.step = step
        self.loss = loss


class PartialCompletionError(DermShiftError):
    exitCode = 4
