try:
    from ._version import version as __version__
except ImportError:
    __version__ = "unknown"


from ._reader import get_reader
from ._writer import write_pfm, write_ppm
from .pipeline import PipelineConfig, run_vton
