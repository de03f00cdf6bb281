"""Toolkit for modulated-LED signals observed by a moving event camera.

Submodules:
  core       events, camera geometry, poses, per-pixel time map
  protocol   interval-modulation codec for LED identifiers
  simulator  deterministic synthetic event streams and annotations
  cmax       contrast-maximization motion estimation and compensation
  pipeline   per-frame decoding, clustering, and PnP localization
  io         file formats, scene configs, dataset layout
  metrics    detection rate and pose error
  bench      benchmark runner and reports
"""

__version__ = "0.1.0"

from .core import (
    NEVER,
    CameraIntrinsics,
    Event,
    EventStream,
    Pose,
    TimeMap,
    backproject,
    project,
    rotation_exp,
)
from .protocol import (
    BlinkWaveform,
    DecodedId,
    ProtocolConfig,
    Symbol,
    SymbolSequence,
    classify_interval,
    decode_intervals,
    encode_id,
    symbols_to_waveform,
)

__all__ = [
    "NEVER",
    "CameraIntrinsics",
    "Event",
    "EventStream",
    "Pose",
    "TimeMap",
    "backproject",
    "project",
    "rotation_exp",
    "BlinkWaveform",
    "DecodedId",
    "ProtocolConfig",
    "Symbol",
    "SymbolSequence",
    "classify_interval",
    "decode_intervals",
    "encode_id",
    "symbols_to_waveform",
    "__version__",
]
