import os
import subprocess
import sys

import numpy as np
import pytest

from sigmak import _kernels

needs_numba = pytest.mark.skipif(not hasattr(_kernels, "_esym_numba"), reason="numba not available")


@needs_numba
def test_backends_agree():
    rng = np.random.default_rng(0)
    lam = rng.normal(size=(500, 5))
    e_np = _kernels._esym_numpy(lam, 5)
    e_nb = _kernels._esym_numba(lam, 5)
    assert np.allclose(e_np, e_nb, rtol=1e-14, atol=1e-14)
    for k in range(5):
        assert np.allclose(_kernels._newton_diag_numpy(lam, e_np, k), _kernels._newton_diag_numba(lam, e_np, k), atol=1e-13)


@needs_numba
def test_stencil_backends_agree():
    from scipy.sparse import coo_matrix

    rng = np.random.default_rng(1)
    m, n = 6, 3
    N = m**n
    interior = np.zeros((m,) * n, bool)
    interior[(slice(1, -1),) * n] = True
    args = (
        rng.normal(size=(N, n, n)),
        rng.normal(size=(N, n)),
        rng.normal(size=N),
        np.arange(N, dtype=np.int64),
        np.array([m * m, m, 1], dtype=np.int64),
        np.full(n, 5.0),
        np.full(n, 25.0),
        interior.ravel(),
    )
    mats = []
    for fn in (_kernels._stencil_coo_numpy, _kernels._stencil_coo_numba):
        r, c, v = fn(*args)
        mats.append(coo_matrix((v, (r, c)), shape=(N, N)).toarray())
    assert np.allclose(mats[0], mats[1], atol=1e-12)
    # boundary rows are identity rows
    b = np.flatnonzero(~interior.ravel())
    assert np.allclose(mats[0][b][:, b], np.eye(len(b)))


def test_esym_known_values():
    e = _kernels.esym(np.array([[1.0, 2.0, 3.0]]), 3)
    assert np.allclose(e, [[1, 6, 11, 6]])


def test_flag_selects_numpy():
    env = dict(os.environ, SIGMAK_NO_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from sigmak import _kernels; print(_kernels.backend())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
