"""Event-camera simulation and spiking-network driving-state recognition.

Two halves:

* ``ingest`` / ``v2e`` / ``events`` turn conventional grayscale video into
  synthetic DVS event streams and aggregate them into clips.
* ``autodiff`` / ``nnops`` / ``spiking`` / ``model`` / ``train`` / ``metrics``
  implement and evaluate a guide-attention convolutional spiking classifier
  on those clips, trained with surrogate-gradient backpropagation through
  time.

``evstate.cli`` exposes everything as one command-line tool.
"""

from .errors import ConfigError, DataError, DecodeError, EvstateError, FormatError, NumericError
from .events import Clip, ClipSpec, EventFrame, Sequence, aggregate, parse_protocol, sample_clip
from .ingest import LogFrame, LumaFrame, decode_frame, lin_log, normalize_luma
from .v2e import EVENT_DTYPE, PixelArrayState, V2eParams, convert_video, init_state

__all__ = [
    "Clip",
    "ClipSpec",
    "ConfigError",
    "DataError",
    "DecodeError",
    "EVENT_DTYPE",
    "EventFrame",
    "EvstateError",
    "FormatError",
    "LogFrame",
    "LumaFrame",
    "NumericError",
    "PixelArrayState",
    "Sequence",
    "V2eParams",
    "aggregate",
    "convert_video",
    "decode_frame",
    "init_state",
    "lin_log",
    "normalize_luma",
    "parse_protocol",
    "sample_clip",
]

__version__ = "0.1.0"
