class CortexError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(CortexError, ValueError):
    pass


class ShapeError(CortexError, ValueError):
    pass


class ContractError(CortexError, ValueError):
    """A call violated a documented precondition (e.g. wrong scene pairing)."""


class InputError(CortexError, ValueError):
    pass


class ExtractionError(CortexError):
    def __init__(self, message: str, pair_id: str | None = None):
        super().__init__(message if pair_id is None else f"{pair_id}: {message}")
        self.pair_id = pair_id


class DegenerateOutputError(ExtractionError):
    """The VLM answered, but nothing usable survived parsing."""


class EncoderError(CortexError):
    pass


class TrainingError(CortexError):
    pass
