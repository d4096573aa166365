"""neurotok: sample-level tokenizers for continuous multichannel time series,
a desk-scale autoregressive transformer, and an evaluation battery."""

__version__ = "0.1.0"

from .core import ScaleParams, SyntheticSpec, TimeSeries
from .fixedtok import FixedTokenizer, TokenSequence
from .gpt import GptConfig, GptModel, SamplerConfig
from .learntok import AnnealSchedule, LearnableTokenizer, RefactorMap

__all__ = [
    "__version__",
    "TimeSeries",
    "ScaleParams",
    "SyntheticSpec",
    "FixedTokenizer",
    "TokenSequence",
    "LearnableTokenizer",
    "AnnealSchedule",
    "RefactorMap",
    "GptModel",
    "GptConfig",
    "SamplerConfig",
]
