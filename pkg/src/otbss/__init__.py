"""Determined blind source separation with optimal-transport source models.

Subpackages cover WAV/STFT handling (:mod:`otbss.audio`), image-source
room simulation (:mod:`otbss.roomsim`), nonnegative source-variance
models (:mod:`otbss.nmf`), entropic optimal transport on spectra
(:mod:`otbss.sinkhorn`, :mod:`otbss.kron`), the separation engine
(:mod:`otbss.engine`), separation metrics (:mod:`otbss.metrics`), and a
command-line interface (:mod:`otbss.cli`).
"""

__version__ = "0.1.0"
