"""Hot-kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set ``VIEO_PURE=1`` to force the fallback (used by the benchmark and the
kernel-agreement tests).
"""

import os

from . import fallback

if os.environ.get("VIEO_PURE"):
    _impl = fallback
else:
    try:
        from . import native as _impl  # compiled extension
    except ImportError:
        _impl = fallback

NATIVE = _impl is not fallback

visual_eval = _impl.visual_eval
