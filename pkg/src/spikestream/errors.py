"""Exception hierarchy shared by every subsystem."""


class SpikeStreamError(Exception):
    """Base class for all simulator errors."""


# tensor formats
class IndexWidthOverflow(SpikeStreamError):
    pass


class MalformedMap(SpikeStreamError):
    pass


class FormatError(SpikeStreamError):
    """Bad magic, version or truncated payload in a binary file."""


# machine model
class SpmFault(SpikeStreamError):
    pass


class OutOfSpm(SpmFault):
    pass


class SpmWriteConflict(SpmFault):
    """Two cores wrote the same SPM address between barriers."""


class SlotCapability(SpikeStreamError):
    pass


class StreamExhausted(SpikeStreamError):
    pass


# kernels / runtime
class GeometryMismatch(SpikeStreamError):
    pass


class BufferOverflow(SpikeStreamError):
    pass


class DoubleUpdate(SpikeStreamError):
    """A receptive field or neuron-state word was processed more than once."""


class SpmOverflow(SpikeStreamError):
    def __init__(self, layer: str, required: int, capacity: int):
        super().__init__(
            f"layer {layer!r} needs {required} bytes of SPM for its minimal "
            f"working set, capacity is {capacity}"
        )
        self.layer = layer
        self.required = required
        self.capacity = capacity


class ConfigError(SpikeStreamError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class MetricsError(SpikeStreamError):
    pass
