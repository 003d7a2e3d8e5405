"""Hot kernels, compiled when available.

``BACKEND`` is ``"cython"`` when the extension imported, else ``"numpy"``.
Set ``ARCHOSCOPE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "numpy"
if not os.environ.get("ARCHOSCOPE_PURE_PYTHON"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

render_spans = _impl.render_spans
peak_nms = _impl.peak_nms
