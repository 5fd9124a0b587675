"""Pure numpy im2col / col2im, used when the compiled extension is absent."""
import numpy as np


def im2col(x, kh, kw, sh, sw, ph, pw, out_h, out_w, num_threads=1):
    N, C, H, W = x.shape
    img = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    cols = np.empty((N, C, kh, kw, out_h, out_w), dtype=x.dtype)
    for i in range(kh):
        i_max = i + sh * out_h
        for j in range(kw):
            j_max = j + sw * out_w
            cols[:, :, i, j] = img[:, :, i:i_max:sh, j:j_max:sw]
    return cols.reshape(N, C * kh * kw, out_h * out_w)


def col2im(cols, N, C, H, W, kh, kw, sh, sw, ph, pw, out_h, out_w, num_threads=1):
    cols = cols.reshape(N, C, kh, kw, out_h, out_w)
    # Large enough for every strided slice, cropped back to H x W at the end.
    img = np.zeros(
        (N, C, max(H + 2 * ph, sh * (out_h - 1) + kh), max(W + 2 * pw, sw * (out_w - 1) + kw)),
        dtype=cols.dtype,
    )
    for i in range(kh):
        i_max = i + sh * out_h
        for j in range(kw):
            j_max = j + sw * out_w
            img[:, :, i:i_max:sh, j:j_max:sw] += cols[:, :, i, j]
    return np.ascontiguousarray(img[:, :, ph:ph + H, pw:pw + W])
