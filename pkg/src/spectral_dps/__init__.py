"""Spectral CT material decomposition with diffusion posterior sampling.

Modules: ``phantoms``, ``projector``, ``physics``, ``diffusion``,
``denoiser``, ``decompose``, ``metrics``, ``oracles``, ``io``, ``config`` and
``cli``.  The torch-backed denoiser is imported lazily by the modules that
need it.
"""

from .phantoms import MaterialImage, synth_phantom
from .projector import Geometry
from .physics import SpectralSinogram, SpectralSystem, make_system

__version__ = "0.1.0"

__all__ = ["Geometry", "MaterialImage", "SpectralSinogram", "SpectralSystem", "make_system",
           "synth_phantom", "__version__"]
