"""Exception hierarchy shared by all subsystems."""


class SeqDiscError(Exception):
    """Base class for errors raised by this package."""


class UsageError(SeqDiscError):
    """Bad configuration or command line."""


class DataError(SeqDiscError):
    """Malformed or inconsistent input data."""


class NumericError(SeqDiscError):
    """Non-finite values or other numeric breakdown."""


class GraphError(DataError):
    pass


class UnknownSymbolError(GraphError, KeyError):
    def __init__(self, symbol, table: str = "symbol table"):
        self.symbol = symbol
        super().__init__(f"unknown symbol {symbol!r} in {table}")

    def __str__(self) -> str:
        return self.args[0]


class CycleError(GraphError):
    pass


class FormatError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DecodeError(SeqDiscError):
    """Decoding produced no complete path.

    ``reason`` is ``"pruned"`` when the beam removed every surviving token and
    ``"no-path"`` when the graph admits no path of the requested length.
    """

    def __init__(self, message: str, reason: str = "pruned"):
        self.reason = reason
        super().__init__(message)


class AlignmentError(DecodeError):
    pass


class SimulationError(DataError):
    pass


class WorkerError(SeqDiscError):
    def __init__(self, rank: int, detail: str):
        self.rank = rank
        self.detail = detail
        super().__init__(f"worker rank {rank} failed: {detail}")
