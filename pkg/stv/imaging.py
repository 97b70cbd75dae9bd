# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

from math import cos, radians, sin

import cv2
import numpy as np
from PIL import Image, ImageDraw

from .exceptions import DataError

SUPERSAMPLE = 4
background = 0.15

# parameter name -> (low, high) sampling range; positions are fractions of the ROI
FACE_RANGES = (
    ('face_w', 0.62, 0.86),
    ('face_h', 0.72, 0.92),
    ('face_y', 0.50, 0.58),
    ('skin', 0.55, 0.95),
    ('hair', 0.05, 0.45),
    ('hairline', 0.18, 0.34),
    ('eye_y', 0.36, 0.46),
    ('eye_dx', 0.14, 0.22),
    ('eye_r', 0.035, 0.07),
    ('brow_tilt', -0.04, 0.04),
    ('nose_len', 0.10, 0.20),
    ('nose_w', 0.04, 0.09),
    ('mouth_y', 0.68, 0.80),
    ('mouth_w', 0.12, 0.26),
    ('mouth_curve', -0.05, 0.05),
    ('tint_r', 0.85, 1.15),
    ('tint_b', 0.85, 1.15),
)


def face_params(rng):
    return dict((name, float(rng.uniform(lo, hi))) for name, lo, hi in FACE_RANGES)


def _shade(value, params, channels):
    if channels == 1:
        return int(round(255 * value))
    return tuple(int(round(255 * min(1.0, value * t)))
                 for t in (params['tint_r'], 1.0, params['tint_b']))


def render_face(params, rows, cols, channels=1, offset=(0.0, 0.0)):
    """
    Draw a frontal face template as a float ``[channels, rows, cols]``
    image in [0, 1].  ``offset`` shifts the face by (dx, dy) pixels.
    Drawing happens at SUPERSAMPLE times the resolution, then the image
    is reduced with a Lanczos filter.
    """
    if channels not in (1, 3):
        raise DataError("channels must be 1 or 3, got %r" % channels)
    ss = SUPERSAMPLE
    w, h = cols * ss, rows * ss
    p = params
    im = Image.new('L' if channels == 1 else 'RGB', (w, h), color=_shade(background, p, channels))
    d = ImageDraw.Draw(im)
    cx = w / 2.0 + offset[0] * ss
    cy = p['face_y'] * h + offset[1] * ss
    fw, fh = p['face_w'] * w / 2.0, p['face_h'] * h / 2.0
    top = cy - fh

    d.ellipse((cx - fw, top, cx + fw, cy + fh), fill=_shade(p['skin'], p, channels))
    hair_bottom = top + p['hairline'] * h
    d.chord((cx - fw, top, cx + fw, top + 2 * (hair_bottom - top)), 180, 360,
            fill=_shade(p['hair'], p, channels))

    dark = _shade(0.1, p, channels)
    ey = p['eye_y'] * h + offset[1] * ss
    er = p['eye_r'] * w
    for side in (-1, 1):
        ex = cx + side * p['eye_dx'] * w
        d.ellipse((ex - er, ey - er * 0.7, ex + er, ey + er * 0.7), fill=dark)
        by = ey - 2.2 * er
        tilt = side * p['brow_tilt'] * h
        d.line((ex - 1.4 * er, by + tilt, ex + 1.4 * er, by - tilt), fill=dark,
               width=max(1, int(er / 2)))

    nose_top = ey + er
    nw = p['nose_w'] * w
    nose_bottom = nose_top + p['nose_len'] * h
    d.polygon([(cx, nose_top), (cx - nw, nose_bottom), (cx + nw, nose_bottom)],
              fill=_shade(p['skin'] * 0.75, p, channels))

    my = p['mouth_y'] * h + offset[1] * ss
    mw = p['mouth_w'] * w
    bend = p['mouth_curve'] * h
    d.line((cx - mw, my - bend, cx, my + bend, cx + mw, my - bend), fill=dark,
           width=max(1, ss))

    im = im.resize((cols, rows), Image.LANCZOS)
    arr = np.asarray(im, dtype=np.float64) / 255.0
    if channels == 1:
        return arr[None, :, :]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, arr):
    """Write a ``[C, H, W]`` float image as a graymap (C=1) or pixmap (C=3)."""
    arr = np.asarray(arr)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if data.shape[0] == 1:
        im = Image.fromarray(data[0], mode='L')
    elif data.shape[0] == 3:
        im = Image.fromarray(data.transpose(1, 2, 0), mode='RGB')
    else:
        raise DataError("cannot write a %d-channel image" % data.shape[0])
    im.save(path)


def read_image(path):
    try:
        im = Image.open(path)
        im.load()
    except (IOError, OSError) as e:
        raise DataError("cannot read image %s: %s" % (path, e))
    arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None, :, :]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _per_channel(fn, img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return fn(img)
    return np.stack([fn(np.ascontiguousarray(c)) for c in img])


def warp_affine(img, matrix, border='replicate'):
    """Bilinear affine warp of a ``[H, W]`` or ``[C, H, W]`` image."""
    mode = {'replicate': cv2.BORDER_REPLICATE, 'zero': cv2.BORDER_CONSTANT}[border]
    m = np.asarray(matrix, dtype=np.float64)

    def warp(plane):
        h, w = plane.shape
        return cv2.warpAffine(plane, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=mode,
                              borderValue=0.0)
    return _per_channel(warp, img)


def rotation_matrix(degrees, rows, cols):
    return cv2.getRotationMatrix2D(((cols - 1) / 2.0, (rows - 1) / 2.0), degrees, 1.0)


def shear_matrix(factor, rows):
    cy = (rows - 1) / 2.0
    return np.array([[1.0, factor, -factor * cy], [0.0, 1.0, 0.0]])


def translation_matrix(dx, dy):
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]])


def frame_coverage(matrix, rows, cols):
    """Fraction of the warped frame that is sourced from inside the original frame."""
    ones = np.ones((rows, cols), dtype=np.float64)
    return float(warp_affine(ones, matrix, border='zero').mean())


def disk_kernel(radius):
    if radius < 0:
        raise DataError("blur radius must be >= 0, got %r" % radius)
    half = int(np.ceil(radius))
    y, x = np.mgrid[-half:half + 1, -half:half + 1]
    k = (x * x + y * y <= radius * radius + 1e-9).astype(np.float64)
    return k / k.sum()


def motion_kernel(length, angle):
    length = int(length)
    if length < 1:
        raise DataError("motion blur length must be >= 1, got %r" % length)
    size = length if length % 2 else length + 1
    c = (size - 1) / 2.0
    half = (length - 1) / 2.0
    dx, dy = half * cos(radians(angle)), -half * sin(radians(angle))
    canvas = np.zeros((size, size), dtype=np.uint8)
    cv2.line(canvas, (int(round(c - dx)), int(round(c - dy))),
             (int(round(c + dx)), int(round(c + dy))), 255, 1, cv2.LINE_8)
    k = canvas.astype(np.float64)
    return k / k.sum()


def convolve(img, kernel):
    """2-D convolution with replicated borders (shape preserving)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    flipped = np.ascontiguousarray(kernel[::-1, ::-1])
    h, w = np.shape(img)[-2:]
    if kernel.shape[0] > h or kernel.shape[1] > w:
        raise DataError("blur kernel %s larger than the %dx%d image" % (kernel.shape, h, w))

    def filt(plane):
        return cv2.filter2D(plane, cv2.CV_64F, flipped, borderType=cv2.BORDER_REPLICATE)
    return _per_channel(filt, img)
