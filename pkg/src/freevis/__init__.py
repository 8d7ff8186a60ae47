"""Training-free video stylization guidance on a toy video diffusion backbone."""
from .errors import ConfigError, FormatError, FreeVisError, InvalidTensor, NumericalError, ShapeError

__version__ = "0.1.0"
