"""Kernel backend selection: compiled extension if built, pure numpy otherwise.

Set CMT_PURE_KERNELS=1 to force the fallback (used by the benchmark and by
tests that compare the two backends).
"""

import os

from . import pure

if os.environ.get("CMT_PURE_KERNELS") == "1":
    _impl = pure
else:
    try:
        from . import _fastk as _impl
    except ImportError:
        _impl = pure

BACKEND = _impl.BACKEND

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
rmsnorm_fwd = _impl.rmsnorm_fwd
rmsnorm_bwd = _impl.rmsnorm_bwd
rope_fwd = _impl.rope_fwd
silu_fwd = _impl.silu_fwd
silu_bwd = _impl.silu_bwd
xent_fwd = _impl.xent_fwd
xent_bwd = _impl.xent_bwd
