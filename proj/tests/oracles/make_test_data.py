"""Generates the PNG fixtures in tests/data and the toy autoencoder PSNR
calibration (an independent NumPy re-implementation of the 8x8 box-average
autoencoder). Run once; outputs are committed.

    python3 tests/oracles/make_test_data.py tests/data
"""

import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

BASIS = np.array([[0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0.5, 0.5, -0.5], [0.5, -0.5, -0.5]])


def save(path, arr):
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def content_image(n=128):
    y, x = np.mgrid[0:n, 0:n] / (n - 1)
    img = np.zeros((n, n, 3))
    img[..., 0] = 0.35 + 0.4 * y  # sky to ground
    img[..., 1] = 0.55 - 0.2 * y
    img[..., 2] = 0.85 - 0.5 * y
    # a house: wall and roof
    wall = (x > 0.3) & (x < 0.7) & (y > 0.5) & (y < 0.9)
    img[wall] = [0.8, 0.6, 0.4]
    roof = (y > 0.3) & (y <= 0.5) & (np.abs(x - 0.5) < (y - 0.3) * 1.2)
    img[roof] = [0.6, 0.15, 0.1]
    sun = (x - 0.15) ** 2 + (y - 0.15) ** 2 < 0.008
    img[sun] = [1.0, 0.9, 0.3]
    return img


def stripes(n=160, period=10):
    y, x = np.mgrid[0:n, 0:n]
    img = np.zeros((n, n, 3))
    band = ((x + y) // period) % 2 == 0
    img[band] = [0.1, 0.2, 0.7]
    img[~band] = [0.95, 0.85, 0.3]
    return img


def dots(n=160, period=16):
    y, x = np.mgrid[0:n, 0:n]
    cy = (y % period) - period / 2
    cx = (x % period) - period / 2
    img = np.full((n, n, 3), [0.2, 0.6, 0.3])
    img[cx**2 + cy**2 < (period / 3) ** 2] = [0.9, 0.2, 0.5]
    return img


def held_out(seed, n=128):
    """Smooth random scene: low-frequency colour waves plus a few ellipses."""
    rng = np.random.default_rng(1000 + seed)
    y, x = np.mgrid[0:n, 0:n] / (n - 1)
    img = np.zeros((n, n, 3))
    for c in range(3):
        fx, fy, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.3 * np.sin(2 * np.pi * (fx * x + fy * y) + ph)
    for _ in range(3):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        rx, ry = rng.uniform(0.08, 0.25, 2)
        img[((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 < 1.0] = rng.uniform(0.05, 0.95, 3)
    return img


def left_half_mask(n=128):
    m = np.zeros((n, n))
    m[:, : n // 2] = 1.0
    return m


def bilinear(img, h, w):
    sh, sw = img.shape[:2]
    out = np.zeros((h, w, img.shape[2]))
    for yy in range(h):
        fy = min(max((yy + 0.5) * sh / h - 0.5, 0.0), sh - 1)
        y0 = int(np.floor(fy))
        y1 = min(y0 + 1, sh - 1)
        wy = fy - y0
        for xx in range(w):
            fx = min(max((xx + 0.5) * sw / w - 0.5, 0.0), sw - 1)
            x0 = int(np.floor(fx))
            x1 = min(x0 + 1, sw - 1)
            wx = fx - x0
            top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
            bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
            out[yy, xx] = top * (1 - wy) + bot * wy
    return out


def ae_round_trip(img):
    n = img.shape[0]
    s = n // 8
    signed = 2.0 * img - 1.0
    avg = signed.reshape(s, 8, s, 8, 3).mean(axis=(1, 3))  # [s, s, 3]
    z = avg @ BASIS.T  # [s, s, 4]
    back = z @ BASIS  # [s, s, 3]
    up = bilinear(back, n, n)
    return np.clip((up + 1.0) * 0.5, 0.0, 1.0)


def psnr(a, b):
    m = np.mean((a - b) ** 2)
    return float(10.0 * np.log10(1.0 / m))


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "tests/data")
    out.mkdir(parents=True, exist_ok=True)
    save(out / "content.png", content_image())
    save(out / "style_stripes.png", stripes())
    save(out / "style_dots.png", dots())
    save(out / "mask_left.png", left_half_mask())

    # Calibrate on the 8-bit image exactly as the library reads it.
    loaded = np.asarray(Image.open(out / "content.png").convert("RGB"), dtype=np.float64) / 255.0
    rt = ae_round_trip(loaded)
    calib = {
        "content_ae_psnr_db": psnr(loaded, rt),
        "content_ae_psnr_right_half_db": psnr(loaded[:, 64:], rt[:, 64:]),
    }
    held = []
    for i in range(5):
        save(out / f"heldout_{i}.png", held_out(i))
        img = np.asarray(Image.open(out / f"heldout_{i}.png").convert("RGB"), dtype=np.float64) / 255.0
        held.append(psnr(img, ae_round_trip(img)))
    calib["held_out_ae_psnr_db"] = held
    (out / "calibration.json").write_text(json.dumps(calib, indent=1) + "\n")
    print(calib)


if __name__ == "__main__":
    main()
