"""Exception categories; the CLI maps each to an exit status."""


class HawkesAttentionError(Exception):
    exit_code = 1


class ConfigError(HawkesAttentionError):
    exit_code = 2


class DataError(HawkesAttentionError):
    exit_code = 3


class NumericalDivergence(HawkesAttentionError):
    exit_code = 4

    def __init__(self, message: str, sequence_index: int | None = None):
        super().__init__(message)
        self.sequence_index = sequence_index
