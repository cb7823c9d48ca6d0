"""GI-tract MRI slice segmentation toolkit.

Run-length mask codec, 288x288 slice geometry, a from-scratch
reverse-mode autodiff engine with compiled hot kernels, a U-Net builder,
and the full training/evaluation recipe, tied together by the ``gutseg``
command-line tool.
"""

__version__ = "0.1.0"
