"""sRGB to CIELAB conversion and the CIEDE2000 color difference.

All functions are vectorized: color arguments are arrays of shape (..., 3)
(or anything broadcastable to it) and results broadcast accordingly. The
conversion assumes the D65/2-degree sRGB working space, which is the usual
default for slide scanners. Channels may be fractional, since reference
colors averaged from real pixels are themselves fractional.
"""

from __future__ import annotations

import numpy as np

# Reference colors: the near-white background shade of scanned slides and
# the stain reference brown averaged from PD-L1 positive pixels.
REFERENCE_WHITE_RGB = (238.0, 238.0, 238.0)
BASE_BROWN_RGB = (117.3, 88.9, 67.3)

# sRGB -> XYZ (D65, 2 degrees), linear-light matrix.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE_XYZ = np.array([0.95047, 1.0, 1.08883])

_DELTA = 6.0 / 29.0  # CIELAB f(t) linear/cube-root crossover


def srgb_to_lab(rgb) -> np.ndarray:
    """Convert sRGB values in [0, 255] to CIELAB (D65, 2 degrees).

    Accepts an array of shape (..., 3); returns Lab with the same shape.
    Raises ValueError for non-finite or out-of-range channels.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {rgb.shape}")
    if not np.all(np.isfinite(rgb)):
        raise ValueError("RGB channels must be finite")
    if rgb.min() < 0.0 or rgb.max() > 255.0:
        raise ValueError("RGB channels must lie in [0, 255]")

    c = rgb / 255.0
    linear = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T
    t = xyz / _D65_WHITE_XYZ
    f = np.where(t > _DELTA**3, np.cbrt(t), t / (3.0 * _DELTA**2) + 4.0 / 29.0)

    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def ciede2000(lab1, lab2) -> np.ndarray | float:
    """CIEDE2000 color difference between Lab colors (kL = kC = kH = 1).

    Implements the full formula: chroma-dependent a-axis rescaling, the
    lightness/chroma/hue weighting functions, the rotation term, and the
    hue-angle wraparound rules (hue difference and mean fall back to 0 and
    the plain sum when either chroma is zero). Scalar inputs give a scalar.
    """
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    if not (np.all(np.isfinite(lab1)) and np.all(np.isfinite(lab2))):
        raise ValueError("Lab components must be finite")

    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    C_mean7 = ((C1 + C2) / 2.0) ** 7
    G = 0.5 * (1.0 - np.sqrt(C_mean7 / (C_mean7 + 25.0**7)))

    a1p = (1.0 + G) * a1
    a2p = (1.0 + G) * a2
    C1p = np.hypot(a1p, b1)
    C2p = np.hypot(a2p, b2)

    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0

    dLp = L2 - L1
    dCp = C2p - C1p

    zero_chroma = (C1p * C2p) == 0.0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    dh = np.where(zero_chroma, 0.0, dh)
    dHp = 2.0 * np.sqrt(C1p * C2p) * np.sin(np.radians(dh) / 2.0)

    Lp_mean = (L1 + L2) / 2.0
    Cp_mean = (C1p + C2p) / 2.0

    h_sum = h1p + h2p
    h_mean = np.where(
        np.abs(h1p - h2p) <= 180.0,
        h_sum / 2.0,
        np.where(h_sum < 360.0, (h_sum + 360.0) / 2.0, (h_sum - 360.0) / 2.0),
    )
    h_mean = np.where(zero_chroma, h_sum, h_mean)

    T = (
        1.0
        - 0.17 * np.cos(np.radians(h_mean - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * h_mean))
        + 0.32 * np.cos(np.radians(3.0 * h_mean + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * h_mean - 63.0))
    )

    SL = 1.0 + (0.015 * (Lp_mean - 50.0) ** 2) / np.sqrt(20.0 + (Lp_mean - 50.0) ** 2)
    SC = 1.0 + 0.045 * Cp_mean
    SH = 1.0 + 0.015 * Cp_mean * T

    dtheta = 30.0 * np.exp(-(((h_mean - 275.0) / 25.0) ** 2))
    Cp_mean7 = Cp_mean**7
    RC = 2.0 * np.sqrt(Cp_mean7 / (Cp_mean7 + 25.0**7))
    RT = -np.sin(np.radians(2.0 * dtheta)) * RC

    tL = dLp / SL
    tC = dCp / SC
    tH = dHp / SH
    de = np.sqrt(tL**2 + tC**2 + tH**2 + RT * tC * tH)
    return float(de) if de.ndim == 0 else de


_LAB_WHITE = srgb_to_lab(REFERENCE_WHITE_RGB)
_LAB_BROWN = srgb_to_lab(BASE_BROWN_RGB)


def distance_to_white(rgb) -> np.ndarray | float:
    """CIEDE2000 distance from the near-white slide background color."""
    return ciede2000(srgb_to_lab(rgb), _LAB_WHITE)


def distance_to_brown(rgb) -> np.ndarray | float:
    """CIEDE2000 distance from the reference stain brown."""
    return ciede2000(srgb_to_lab(rgb), _LAB_BROWN)
