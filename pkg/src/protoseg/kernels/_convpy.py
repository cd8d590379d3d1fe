"""Pure-NumPy kernel lane: 3x3 convolution and 2x2 max-pooling.

Convolution is expressed as im2col + matrix product so the heavy lifting
lands in BLAS. Shapes follow the engine convention [B, C, H, W]; arrays
must be C-contiguous float32 or float64.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def _cols(x):
    """Flatten 3x3 zero-padded patches to rows of [B*H*W, C*9]."""
    b, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def conv2d_forward(x, kernel, bias):
    b, _, h, w = x.shape
    cout = kernel.shape[0]
    out = _cols(x) @ kernel.reshape(cout, -1).T
    out += bias
    return np.ascontiguousarray(out.reshape(b, h, w, cout).transpose(0, 3, 1, 2))


def conv2d_backward(x, kernel, gout):
    b, cin, h, w = x.shape
    cout = kernel.shape[0]
    gmat = gout.transpose(0, 2, 3, 1).reshape(b * h * w, cout)
    gkernel = (gmat.T @ _cols(x)).reshape(cout, cin, 3, 3)
    gbias = gout.sum(axis=(0, 2, 3))
    # input gradient: correlate gout with the spatially flipped kernel
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * 9)
    gx = _cols(gout) @ flipped.T
    gx = np.ascontiguousarray(gx.reshape(b, h, w, cin).transpose(0, 3, 1, 2))
    return gx, gkernel, gbias


def maxpool_forward(x):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=4)  # first occurrence wins ties (row-major window)
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def maxpool_backward(idx, gout):
    b, c, h2, w2 = gout.shape
    g = np.zeros((b, c, h2, w2, 4), dtype=gout.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.intp), gout[..., None], axis=4)
    g = g.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(b, c, h2 * 2, w2 * 2))
