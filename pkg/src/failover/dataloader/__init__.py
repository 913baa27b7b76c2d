"""Preloading data loader."""

from .core import (RECORD_HEADER, DataServerStub, PreloadBuffer, item_bytes, write_record_file)
from .sim import (DataServerService, Preloader, controller_indices, fan_out_indices,
                  fanned_indices, index_tag)

__all__ = [
    "RECORD_HEADER", "DataServerService", "DataServerStub", "PreloadBuffer", "Preloader",
    "controller_indices", "fan_out_indices", "fanned_indices", "index_tag", "item_bytes",
    "write_record_file",
]
