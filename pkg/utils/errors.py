class DgmrfError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(DgmrfError, ValueError):
    pass


class GraphParseError(ValidationError):
    def __init__(self, path, line_number, line):
        self.path = path
        self.line_number = line_number
        self.line = line
        super(GraphParseError, self).__init__(f'{path}:{line_number}: cannot parse edge "{line.strip()}"')


class NodeBoundsError(DgmrfError, IndexError):
    pass


class GraphValidationError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class BackendMismatchError(ValidationError):
    pass


class CapacityError(DgmrfError, RuntimeError):
    pass


class NumericError(DgmrfError, ArithmeticError):
    def __init__(self, message, term=None):
        self.term = term
        super(NumericError, self).__init__(message if term is None else f'{message} (term: {term})')


class TrainingDivergedError(NumericError):
    def __init__(self, iteration, last_state, term=None):
        self.iteration = iteration
        # detached copy of the parameters from the last iteration with a finite ELBO
        self.last_state = last_state
        super(TrainingDivergedError, self).__init__(f'ELBO diverged at iteration {iteration}', term)


class StageError(DgmrfError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super(StageError, self).__init__(f'stage "{stage}" failed: {cause}')
