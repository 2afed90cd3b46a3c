from .errors import PlaneQCError

__version__ = "0.1.0"
