#!/usr/bin/env python3
"""Independent NumPy recomputation of the toy Gram style loss and the
LPIPS-style distance.

Reads the dump written by sigstyle_dump_metrics and writes
tests/data/metrics_probe.safetensors with the probes, the expected Gram
matrices of the two texture probes and the expected metric values.

    ./build/sigstyle_dump_metrics tests/data /tmp/metrics_dump.safetensors
    python3 tests/oracles/metrics_oracle.py /tmp/metrics_dump.safetensors tests/data/metrics_probe.safetensors
"""
import sys

import numpy as np

from toy_forward_oracle import read_st, write_st

PAIRS = [(0, 1), (1, 2), (2, 4), (0, 3)]
SIGMAS = [0.01, 0.05, 0.1]


def conv3_relu(x, w, b):
    c, h, wd = x.shape
    pad = np.zeros((c, h + 2, wd + 2))
    pad[:, 1:-1, 1:-1] = x
    out = np.zeros((w.shape[0], h, wd))
    for dy in range(3):
        for dx in range(3):
            patch = pad[:, dy:dy + h, dx:dx + wd]
            out += np.einsum("oc,chw->ohw", w[:, :, dy, dx], patch)
    out += b[:, None, None]
    return np.maximum(out, 0.0)


def pool(x):
    c, h, w = x.shape
    h, w = h // 2, w // 2
    return x[:, : 2 * h, : 2 * w].reshape(c, h, 2, w, 2).max(axis=(2, 4))


def features(img, weights):
    x = (img - 0.5) / 0.5
    feats = []
    for i in range(3):
        if i > 0:
            x = pool(x)
        x = conv3_relu(x, weights[f"extractor.conv{i}.weight"], weights[f"extractor.conv{i}.bias"])
        feats.append(x)
    return feats


def gram(f):
    c = f.shape[0]
    flat = f.reshape(c, -1)
    return flat @ flat.T / (c * flat.shape[1])


def style_loss(a, b, w):
    return sum(np.mean((gram(fa) - gram(fb)) ** 2) for fa, fb in zip(features(a, w), features(b, w)))


def lpips(a, b, w):
    total = 0.0
    for fa, fb in zip(features(a, w), features(b, w)):
        na = fa / (np.sqrt((fa**2).sum(axis=0, keepdims=True)) + 1e-10)
        nb = fb / (np.sqrt((fb**2).sum(axis=0, keepdims=True)) + 1e-10)
        total += ((na - nb) ** 2).sum(axis=0).mean()
    return total


def main():
    dump, meta = read_st(sys.argv[1])
    probes = [dump[f"input.{i}"] for i in range(5)]
    noise = dump["noise"]
    out = {k: v for k, v in dump.items() if not k.startswith("extractor.")}
    for p in (1, 2):
        for layer, f in enumerate(features(probes[p], dump)):
            out[f"gram.{p}.relu{layer + 1}"] = gram(f)
    out["expected.style_loss"] = np.array([style_loss(probes[i], probes[j], dump) for i, j in PAIRS])
    out["expected.lpips"] = np.array([lpips(probes[i], probes[j], dump) for i, j in PAIRS])
    out["expected.noise_lpips"] = np.array([[lpips(x, x + s * noise, dump) for s in SIGMAS] for x in probes])
    meta = {
        "weights_digest": meta["weights_digest"],
        "pairs": ";".join(f"{i},{j}" for i, j in PAIRS),
        "sigmas": ",".join(str(s) for s in SIGMAS),
    }
    write_st(sys.argv[2], out, meta)
    print(out["expected.style_loss"], out["expected.lpips"])
    print(out["expected.noise_lpips"])


if __name__ == "__main__":
    main()
