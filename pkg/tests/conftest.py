"""Shared test utilities: finite differences, loop oracles, synthetic clouds."""

import numpy as np
import pytest

from pstpcqa.autodiff import Tensor
from pstpcqa.network import ModelConfig, SGPConfig
from pstpcqa.pointcloud import PointCloud


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative disagreement between gradient arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_diff(f, tensor: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar f() w.r.t. one tensor.

    f must rebuild its forward pass from tensor.data on every call.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        f_plus = float(f())
        flat[i] = orig - step
        f_minus = float(f())
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def gradcheck(build_loss, tensors, tol: float, h: float = 1e-6) -> float:
    """Assert analytic grads of build_loss() match finite differences.

    build_loss constructs the graph fresh and returns the scalar loss
    Tensor. Returns the worst relative error observed.
    """
    from pstpcqa.autodiff import backward

    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "gradient missing after backward"
        numeric = finite_diff(lambda: build_loss().data, t, h=h)
        err = rel_error(t.grad, numeric)
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch: rel error {err:.3e} > {tol:.0e}"
    return worst


# ---------------------------------------------------------------------------
# Loop oracles (independent of the vectorized implementations)
# ---------------------------------------------------------------------------

def conv1d_oracle(x, w, b, stride, groups):
    """Nested-loop grouped cross-correlation; x is (C_in, L)."""
    c_in, length = x.shape
    c_out, c_in_g, k_w = w.shape
    l_out = (length - k_w) // stride + 1
    out = np.zeros((c_out, l_out))
    c_out_g = c_out // groups
    for co in range(c_out):
        g = co // c_out_g
        for l in range(l_out):
            acc = 0.0
            for ci in range(c_in_g):
                for t in range(k_w):
                    acc += x[g * c_in_g + ci, l * stride + t] * w[co, ci, t]
            out[co, l] = acc + b[co]
    return out


def linear_oracle(x, w, b):
    rows = x.reshape(-1, x.shape[-1])
    out = np.zeros((rows.shape[0], w.shape[0]))
    for r in range(rows.shape[0]):
        for o in range(w.shape[0]):
            out[r, o] = float(np.dot(rows[r], w[o])) + b[o]
    return out.reshape(x.shape[:-1] + (w.shape[0],))


def batchnorm_oracle_train(x, gamma, beta, eps):
    """Per-channel normalization over all non-channel axes of (B,C) or (B,C,L)."""
    axes = (0,) if x.ndim == 2 else (0, 2)
    out = np.zeros_like(x)
    for c in range(x.shape[1]):
        sl = x[:, c] if x.ndim == 2 else x[:, c, :]
        mu = sl.mean()
        var = ((sl - mu) ** 2).mean()
        norm = (sl - mu) / np.sqrt(var + eps) * gamma[c] + beta[c]
        if x.ndim == 2:
            out[:, c] = norm
        else:
            out[:, c, :] = norm
    return out


def reduce_oracle(x, axis, kind):
    moved = np.moveaxis(x, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    out = np.zeros(flat.shape[0])
    for r in range(flat.shape[0]):
        row = flat[r]
        if kind == "max":
            out[r] = row.max()
        elif kind == "mean":
            out[r] = row.sum() / len(row)
        else:
            m = row.sum() / len(row)
            out[r] = sum((v - m) ** 2 for v in row) / len(row)
    return out.reshape(moved.shape[:-1])


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def random_cloud(rng, n=200) -> PointCloud:
    pts = np.hstack([rng.normal(scale=3.0, size=(n, 3)), rng.uniform(size=(n, 3))])
    return PointCloud(pts)


def blob_cloud(seed: int, n_points: int = 600, n_blobs: int = 4,
               noise: float = 0.0) -> PointCloud:
    """A mixture of Gaussian blobs with per-blob colors; optional distortion."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-10.0, 10.0, size=(n_blobs, 3))
    base_colors = rng.uniform(0.2, 0.8, size=(n_blobs, 3))
    assign = rng.integers(0, n_blobs, size=n_points)
    coords = centers[assign] + rng.normal(scale=1.0, size=(n_points, 3))
    colors = np.clip(base_colors[assign] + rng.normal(scale=0.02, size=(n_points, 3)), 0.0, 1.0)
    if noise > 0.0:
        coords = coords + rng.normal(scale=noise, size=coords.shape)
        colors = np.clip(colors + rng.normal(scale=noise * 0.1, size=colors.shape), 0.0, 1.0)
    return PointCloud(np.hstack([coords, colors]))


def tiny_model_config(seed: int = 7) -> ModelConfig:
    """Scaled-down architecture for gradient checks and fast training tests."""
    return ModelConfig(
        K=2, Np=64, Ns=16, Nt=32,
        sgp1=SGPConfig(n_out=8, k=4, d_out=8, mlp_widths=(8, 8), conv_groups=2),
        sgp2=SGPConfig(n_out=4, k=3, d_out=8, mlp_widths=(8, 8), conv_groups=2),
        side_branch_channels=8,
        seed=seed,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
