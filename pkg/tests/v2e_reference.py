"""Brute-force single-pixel reference simulator for the DVS pixel model.

This is the independent oracle for the vectorized converter: it walks every
pixel separately with plain Python floats, applying the pixel model steps in
order (lin-log, finite-bandwidth low-pass, leak decrement, threshold
quantization with magnitude-floor emission). Noise is out of scope here; the
converter is compared event-for-event against this implementation with noise
disabled.

Per-pixel thresholds are taken as inputs so the oracle exercises the pixel
dynamics, not the threshold sampler (which has its own statistical tests).
"""

import math

import numpy as np

from evstate import ingest

TWO_PI = 2.0 * np.pi


def reference_events(frames, theta_on_px, theta_off_px, params):
    """Simulate every pixel independently; return [(t_us, x, y, p), ...] sorted.

    frames: list of ingest.LumaFrame with strictly increasing t_us.
    theta_on_px / theta_off_px: per-pixel threshold arrays (H, W).
    params: anything exposing theta_on, f3db_max, bw_floor, leak_rate,
    filter_mode; noise parameters are ignored (assumed off).
    """
    height, width = frames[0].data.shape
    out = []
    for row in range(height):
        for col in range(width):
            l_mem = l_lp = float(ingest.lin_log(float(frames[0].data[row, col])))
            t_on = float(theta_on_px[row, col])
            t_off = float(theta_off_px[row, col])
            for i in range(1, len(frames)):
                t0 = int(frames[i - 1].t_us)
                t1 = int(frames[i].t_us)
                dt_s = (t1 - t0) / 1e6
                dn = float(frames[i].data[row, col])
                target = float(ingest.lin_log(dn))
                y_norm = dn / 255.0
                f_cut = params.f3db_max * (params.bw_floor + (1.0 - params.bw_floor) * y_norm)
                if params.filter_mode == "exact":
                    eps = 1.0 - float(np.exp(-(TWO_PI * f_cut * dt_s)))
                else:
                    eps = min(1.0, TWO_PI * f_cut * dt_s)
                l_lp = l_lp + eps * (target - l_lp)
                if params.leak_rate > 0.0:
                    l_mem = l_mem - (params.leak_rate * params.theta_on) * dt_s
                delta = l_lp - l_mem
                if delta > 0.0:
                    count = int(math.floor(delta / t_on))
                    polarity, theta = 1, t_on
                elif delta < 0.0:
                    count = int(math.floor(-delta / t_off))
                    polarity, theta = 0, t_off
                else:
                    count = 0
                if count:
                    dt_us = t1 - t0
                    for k in range(1, count + 1):
                        t_ev = t0 + (dt_us * k + count - 1) // count
                        out.append((t_ev, col, row, polarity))
                    l_mem = l_mem + count * theta if polarity else l_mem - count * theta
    out.sort(key=lambda e: (e[0], e[2], e[1], e[3]))
    return out
