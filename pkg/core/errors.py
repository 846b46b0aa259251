"""Exception hierarchy shared by every package in the repository.

Each error carries a short ``code`` so the command line can print a single
machine-parsable line (``error: <code>: <message>``).
"""


class MoATTSError(Exception):
    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        text = " ".join(str(self.message).split())
        return f"error: {self.code}: {text}"


class DimensionError(MoATTSError):
    code = "dimension"


class ContractError(MoATTSError):
    code = "contract"


class ConfigurationError(MoATTSError):
    code = "config"


class InputError(MoATTSError):
    code = "input"


class EmptyInputError(MoATTSError):
    code = "empty"


class OracleError(MoATTSError):
    code = "oracle"


class AlignmentError(MoATTSError):
    code = "alignment"


class UndefinedMetricError(MoATTSError):
    code = "undefined_metric"


class LoadError(MoATTSError):
    code = "load"


class NonFiniteLossError(MoATTSError):
    code = "nan"


class OutputExistsError(MoATTSError):
    code = "exists"
