class MojitoError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MojitoError, ValueError):
    pass


class ContractError(MojitoError, ValueError):
    pass


class DomainError(MojitoError, ValueError):
    pass


class DegenerateRowError(MojitoError, ValueError):
    """A softmax row had every entry masked out."""


class EmbeddingIndexError(MojitoError, IndexError):
    pass


class DataFormatError(MojitoError, ValueError):
    pass


class ConfigError(MojitoError, ValueError):
    """Raised with every offending key listed in the message."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NonFiniteLossError(MojitoError, FloatingPointError):
    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message)
