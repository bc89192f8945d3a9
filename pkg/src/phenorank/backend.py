"""Compute-backend selection for the hot distance kernel.

Two interchangeable implementations of the clamped cosine-distance
matrix exist:

* ``numba``: a JIT-compiled tiled kernel.  Every output entry is
  accumulated strictly sequentially over the feature axis, so the
  result is bitwise identical for any tile size and any worker count.
  Parallelises across row blocks via ``prange``.
* ``numpy``: a plain float64 BLAS matrix product followed by a clamp.
  Fastest on a single core, agrees with the numba kernel within 1e-12.

The environment variable ``PHENORANK_BACKEND`` (``numba`` or ``numpy``)
selects the implementation; the default is ``numba`` when importable,
``numpy`` otherwise.  ``benchmarks/bench_distance.py`` compares the two.
"""

import os

import numpy as np

from .errors import ConfigInvalid

ENV_FLAG = "PHENORANK_BACKEND"

# the portable layer; keeps worker behavior identical across machines
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

_DEFAULT_TILE = 1024

_active: str | None = None
_numba_kernel = None


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def active_backend() -> str:
    """Resolve (once) and return the active backend name."""
    global _active
    if _active is None:
        choice = os.environ.get(ENV_FLAG, "").strip().lower()
        if choice and choice not in ("numba", "numpy"):
            raise ConfigInvalid(f"{ENV_FLAG} must be 'numba' or 'numpy', got {choice!r}")
        if choice == "numba" and not _numba_available():
            raise ConfigInvalid(f"{ENV_FLAG}=numba but numba is not importable")
        if not choice:
            choice = "numba" if _numba_available() else "numpy"
        _active = choice
    return _active


def set_backend(name: str | None) -> None:
    """Force a backend (``None`` re-resolves from the environment)."""
    global _active
    if name not in (None, "numba", "numpy"):
        raise ConfigInvalid(f"unknown backend {name!r}")
    if name == "numba" and not _numba_available():
        raise ConfigInvalid("numba backend requested but numba is not importable")
    _active = name


def set_threads(n: int) -> int:
    """Cap worker count for the numba kernel; returns the effective count.

    Results are bitwise independent of this setting by construction.
    """
    if n < 1:
        raise ConfigInvalid("thread count must be >= 1")
    if active_backend() != "numba":
        return 1
    import numba

    effective = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(effective)
    return effective


def _build_numba_kernel():
    from numba import njit, prange

    @njit(parallel=True, cache=True)
    def kernel(test, gallery_t, out, tile):
        # test: (n_t, d) float64; gallery_t: (d, n_g) float64, C-contiguous.
        # Each out[i, j] is accumulated in feature order k = 0..d-1 with no
        # reassociation, so tiling and thread count cannot change the bits.
        n_t, d = test.shape
        n_g = gallery_t.shape[1]
        n_bi = (n_t + 3) // 4
        n_bj = (n_g + tile - 1) // tile
        for w in prange(n_bi * n_bj):
            bi = w // n_bj
            bj = w % n_bj
            i0 = bi * 4
            j0 = bj * tile
            j1 = min(j0 + tile, n_g)
            width = j1 - j0
            rows = min(4, n_t - i0)
            if rows == 4:
                a0 = np.zeros(width)
                a1 = np.zeros(width)
                a2 = np.zeros(width)
                a3 = np.zeros(width)
                for k in range(d):
                    g = gallery_t[k, j0:j1]
                    t0 = test[i0, k]
                    t1 = test[i0 + 1, k]
                    t2 = test[i0 + 2, k]
                    t3 = test[i0 + 3, k]
                    for jj in range(width):
                        gv = g[jj]
                        a0[jj] += t0 * gv
                        a1[jj] += t1 * gv
                        a2[jj] += t2 * gv
                        a3[jj] += t3 * gv
                for jj in range(width):
                    col = j0 + jj
                    v = 1.0 - a0[jj]
                    if v < 0.0:
                        v = 0.0
                    elif v > 2.0:
                        v = 2.0
                    out[i0, col] = v
                    v = 1.0 - a1[jj]
                    if v < 0.0:
                        v = 0.0
                    elif v > 2.0:
                        v = 2.0
                    out[i0 + 1, col] = v
                    v = 1.0 - a2[jj]
                    if v < 0.0:
                        v = 0.0
                    elif v > 2.0:
                        v = 2.0
                    out[i0 + 2, col] = v
                    v = 1.0 - a3[jj]
                    if v < 0.0:
                        v = 0.0
                    elif v > 2.0:
                        v = 2.0
                    out[i0 + 3, col] = v
            else:
                for r in range(rows):
                    a = np.zeros(width)
                    for k in range(d):
                        g = gallery_t[k, j0:j1]
                        t = test[i0 + r, k]
                        for jj in range(width):
                            a[jj] += t * g[jj]
                    for jj in range(width):
                        v = 1.0 - a[jj]
                        if v < 0.0:
                            v = 0.0
                        elif v > 2.0:
                            v = 2.0
                        out[i0 + r, j0 + jj] = v

    return kernel


def clamped_distance_matrix(test: np.ndarray, gallery: np.ndarray,
                            tile: int = _DEFAULT_TILE) -> np.ndarray:
    """``out[i, j] = clip(1 - test[i] . gallery[j], 0, 2)`` in float64.

    ``test`` is (n_t, d) and ``gallery`` is (n_g, d); both are promoted
    to float64.  ``tile`` only affects scheduling on the numba backend.
    """
    test = np.ascontiguousarray(test, dtype=np.float64)
    gallery = np.ascontiguousarray(gallery, dtype=np.float64)
    if test.ndim != 2 or gallery.ndim != 2:
        raise ValueError("expected 2-D blocks")
    n_t = test.shape[0]
    n_g = gallery.shape[0]
    if n_t == 0 or n_g == 0:
        return np.zeros((n_t, n_g))
    if active_backend() == "numba":
        global _numba_kernel
        if _numba_kernel is None:
            _numba_kernel = _build_numba_kernel()
        out = np.empty((n_t, n_g))
        gallery_t = np.ascontiguousarray(gallery.T)
        _numba_kernel(test, gallery_t, out, tile)
        return out
    prod = test @ gallery.T
    out = 1.0 - prod
    np.clip(out, 0.0, 2.0, out=out)
    return out
