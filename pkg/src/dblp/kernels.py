"""Hot-loop kernels, compiled when available.

The Cython build of ``dblp._kernels`` is used unless it failed to build or
``DBLP_PURE_PYTHON`` is set to a non-empty value, in which case the
reference implementations in ``dblp._pykernels`` are used. ``BACKEND`` names
the active choice.
"""

import os

if os.environ.get("DBLP_PURE_PYTHON"):
    from ._pykernels import hash_stream, ingest, mix64, stream_key

    BACKEND = "python"
else:
    try:
        from ._kernels import hash_stream, ingest, mix64, stream_key

        BACKEND = "cython"
    except ImportError:
        from ._pykernels import hash_stream, ingest, mix64, stream_key

        BACKEND = "python"

__all__ = ["BACKEND", "hash_stream", "ingest", "mix64", "stream_key", "uniforms"]


def uniforms(key: int, start: int, count: int):
    """Doubles in [0, 1) from the top 53 bits of the counter hash stream."""
    return (hash_stream(key, start, count) >> 11).astype("float64") * (1.0 / (1 << 53))
