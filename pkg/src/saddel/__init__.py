"""Joint speech separation and denoising with one-and-rest PIT."""

from .audio import Waveform, mix_at_snr, si_snr
from .model import Separator, SeparatorConfig
from .recursive import StopRule, separate_recursive

__all__ = ["Waveform", "mix_at_snr", "si_snr", "Separator", "SeparatorConfig", "StopRule", "separate_recursive"]
__version__ = "0.1.0"
