"""Writes manifest.json: inputs and numpy-computed expected outputs for the
runtime golden programs. Rerun only when a program changes."""
import json

import numpy as np

rng = np.random.default_rng(20240611)


def rnd(*shape):
    return np.round(rng.uniform(-2, 2, size=shape), 3).astype(np.float32)


def conv(x, w, stride, same):
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    if same:
        oh, ow = -(-h // stride), -(-wd // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - wd, 0)
        x = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    else:
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, oh, ow, o), np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            out[:, i, j, :] = np.tensordot(patch, w, axes=([1, 2, 3], [0, 1, 2]))
    return out


def xent(logits, labels):
    l = logits.astype(np.float64)
    m = l.max(axis=1, keepdims=True)
    lse = np.log(np.exp(l - m).sum(axis=1)) + m[:, 0]
    return float(np.mean(lse - l[np.arange(len(labels)), labels]))


cases = []


def case(file, args, expected):
    cases.append({
        "file": file,
        "function": "main",
        "args": [{"shape": list(np.shape(a)), "values": np.asarray(a, np.float32).ravel().tolist()} for a in args],
        "expected": {"shape": list(np.shape(expected)),
                     "values": np.asarray(expected, np.float64).ravel().tolist()},
    })


case("01_square.ir", [np.float32(3)], 9.0)
case("02_branch_else.ir", [np.float32(-3)], 3.0)
case("03_cube_loop.ir", [np.float32(1.5)], 1.5 ** 3)
a, b = rnd(2, 1), rnd(3)
case("04_broadcast.ir", [a, b], a * b - b)
a, b = rnd(2, 3), rnd(3, 2)
case("05_matmul.ir", [a, b], a.astype(np.float64) @ b)
a = rnd(2, 3)
case("06_transpose_reduce.ir", [a], a.T.sum(axis=0))
a = rnd(2, 3)
case("07_reduce_mean_axis.ir", [a], a.mean(axis=0))
a = rnd(4)
case("08_exp_log.ir", [a], np.log(np.exp(a.astype(np.float64)) + 1))
a = np.array([-1.5, -0.25, 0, 0.5, 3], np.float32)
case("09_relu_div.ir", [a], np.maximum(a, 0) / 2)
x, w = rnd(1, 3, 3, 1), rnd(2, 2, 1, 1)
case("10_conv_same.ir", [x, w], conv(x, w, 1, True))
x, w = rnd(1, 4, 4, 1), rnd(2, 2, 1, 2)
case("11_conv_valid_stride.ir", [x, w], conv(x, w, 2, False))
x = rnd(1, 4, 4, 1)
case("12_avgpool.ir", [x], x.reshape(1, 2, 2, 2, 2, 1).mean(axis=(2, 4)))
x = rnd(2, 3)
case("13_reshape.ir", [x], -x.reshape(3, 2))
x = rnd(2, 3)
case("14_softmax_xent.ir", [x], xent(x, np.array([2, 0])))
v = rnd(4)
out = v.astype(np.float64).copy()
out[1] = float(v[1]) + float(v[3])
case("15_subscript.ir", [v], out)
case("16_select.ir", [np.float32(0.75), np.float32(-1.25)], -1.25)
case("17_call.ir", [np.float32(1.5), np.float32(-2)], 1.5 ** 2 + 4)
x = rnd(3)
case("18_tuple.ir", [x], float(x.astype(np.float64).sum() - x.astype(np.float64).mean()))
v = rnd(5)
case("19_sum_loop.ir", [v], float(v.astype(np.float64).sum()))
x, w1, b1, w2 = rnd(2, 3), rnd(3, 4), rnd(4), rnd(4, 2)
h = np.maximum(x.astype(np.float64) @ w1 + b1, 0)
case("20_mlp.ir", [x, w1, b1, w2], xent(h @ w2, np.array([1, 0])))

with open("manifest.json", "w") as f:
    json.dump({"cases": cases}, f, indent=1)
    f.write("\n")
