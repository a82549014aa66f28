"""Independent brute-force references used across the test suite.

Everything here is written as plainly as possible (scalar loops, float64) and
must stay independent of the library's vectorized implementations.
"""
import numpy as np


def conv2d_ref(x, w, b, stride, pad, groups=1):
    cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    xp = np.zeros((cin, h + 2 * ph, wd + 2 * pw))
    xp[:, ph:ph + h, pw:pw + wd] = x.astype(np.float64)
    out = np.zeros((cout, oh, ow))
    for co in range(cout):
        g = co // (cout // groups)
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for ci in range(cpg):
                    for a in range(kh):
                        for c in range(kw):
                            acc += float(w[co, ci, a, c]) * xp[g * cpg + ci, i * sh + a, j * sw + c]
                out[co, i, j] = acc + (float(b[co]) if b is not None else 0.0)
    return out


def depthwise_ref(x, w, b, stride, pad):
    c = x.shape[0]
    w4 = np.zeros((c, 1, w.shape[1], w.shape[2]), dtype=w.dtype)
    for ci in range(c):
        w4[ci, 0] = w[ci]
    return conv2d_ref(x, w4, b, stride, pad, groups=c)


def conv3d_ref(x, w, b, stride, pad):
    cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = pad
    od = (d + 2 * pd - kd) // sd + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    xp = np.zeros((cin, d + 2 * pd, h + 2 * ph, wd + 2 * pw))
    xp[:, pd:pd + d, ph:ph + h, pw:pw + wd] = x.astype(np.float64)
    out = np.zeros((cout, od, oh, ow))
    for co in range(cout):
        for z in range(od):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for a in range(kd):
                            for bb in range(kh):
                                for c in range(kw):
                                    acc += float(w[co, ci, a, bb, c]) * \
                                        xp[ci, z * sd + a, i * sh + bb, j * sw + c]
                    out[co, z, i, j] = acc + (float(b[co]) if b is not None else 0.0)
    return out


def cost_volume_ref(fl, fr, d_levels):
    nc, h, w = fl.shape
    out = np.zeros((d_levels, h, w))
    for d in range(d_levels):
        for i in range(h):
            for j in range(w):
                if j - d < 0:
                    continue
                acc = 0.0
                for c in range(nc):
                    acc += float(fl[c, i, j]) * float(fr[c, i, j - d])
                out[d, i, j] = acc / nc
    return out


def softargmax_ref(costs):
    """Scalar soft-argmax over one pixel's cost vector, float64."""
    c = np.asarray(costs, dtype=np.float64)
    e = np.exp(c - c.max())
    p = e / e.sum()
    return float((np.arange(len(c)) * p).sum())


def epe_ref(pred, gt, mask):
    total, n = 0.0, 0
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                total += abs(float(pred[i, j]) - float(gt[i, j]))
                n += 1
    return total / n


def d1_ref(pred, gt, mask):
    bad, n = 0, 0
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                n += 1
                err = abs(float(pred[i, j]) - float(gt[i, j]))
                if err > 3.0 and err > 0.05 * float(gt[i, j]):
                    bad += 1
    return 100.0 * bad / n


def bad_x_ref(pred, gt, mask, x):
    bad, n = 0, 0
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                n += 1
                if abs(float(pred[i, j]) - float(gt[i, j])) > x:
                    bad += 1
    return 100.0 * bad / n
