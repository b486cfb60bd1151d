"""Quality-aware dynamic mixed-precision quantization on a small numpy autodiff core.

Modules: ``tensor`` (reverse-mode autodiff), ``quant`` (fake quantization),
``model`` (backbone), ``sensitivity`` (Hessian traces and pools), ``policy``
(per-layer decision agents), ``dataquality`` (mixed-quality data),
``trainer``, ``report``, ``deploysim`` and ``cli``.
"""

__version__ = "0.1.0"
