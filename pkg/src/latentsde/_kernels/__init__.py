"""Hot sequential recursions: compiled extension when available, pure-Python
fallback otherwise. Set LATENTSDE_PURE_PYTHON=1 to force the fallback."""

import os

from . import _fallback

if os.environ.get("LATENTSDE_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _native as _impl  # type: ignore[attr-defined]

        BACKEND = "native"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

garch_loglik_grad = _impl.garch_loglik_grad
garch_sigma2_path = _impl.garch_sigma2_path
garch_simulate = _impl.garch_simulate
vasicek_path = _impl.vasicek_path
