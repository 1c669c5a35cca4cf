"""DVS pixel model: grayscale video -> asynchronous event stream.

Each pixel holds a memorized log intensity l_mem and a low-pass filtered
log intensity l_lp. Per frame interval the pixel, in order:

1. tracks the new log intensity through a first-order IIR low-pass whose
   cutoff rises with luma (finite analog bandwidth; an affine floor keeps
   dark pixels at ~10% of the full-white cutoff),
2. drifts l_mem downward (leak: spontaneous ON events whose per-pixel rate
   varies with threshold mismatch, decorrelating pixels),
3. emits a signed integer count N = floor(dL / theta) of ON or OFF events
   for the change dL = l_lp - l_mem, advancing l_mem by N multiples of the
   threshold (the fractional residual is retained),
4. optionally draws Bernoulli shot-noise events whose rate falls linearly
   with luma; a noise event resets the pixel (l_mem <- l_lp).

All randomness is counter-based and keyed by (seed, purpose, step, pixel),
so row-partitioned parallel runs are bit-identical to serial runs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .errors import ConfigError, DataError
from .ingest import LogFrame, LumaFrame, lin_log

TWO_PI = 2.0 * np.pi

#: One event: timestamp (us), column, row, polarity (1=ON, 0=OFF).
#: The trailing pad byte makes the in-memory layout identical to an EVT1
#: file record, so stream IO is a straight buffer copy.
EVENT_DTYPE = np.dtype([("t_us", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "<u1"), ("_pad", "<u1")])

THETA_MIN = 0.01


def empty_events() -> np.ndarray:
    return np.empty(0, dtype=EVENT_DTYPE)


def make_events(t_us, x, y, p) -> np.ndarray:
    ev = np.zeros(len(t_us), dtype=EVENT_DTYPE)
    ev["t_us"] = t_us
    ev["x"] = x
    ev["y"] = y
    ev["p"] = p
    return ev


def sort_events(events: np.ndarray) -> np.ndarray:
    """Sort by timestamp, ties broken by (y, x, polarity)."""
    order = np.lexsort((events["p"], events["x"], events["y"], events["t_us"]))
    return events[order]


@dataclass
class V2eParams:
    """Pixel-model parameters; defaults follow the standard sensor model."""

    theta_on: float = 0.2
    theta_off: float = 0.2
    sigma_theta: float = 0.02
    f3db_max: float = 300.0
    bw_floor: float = 0.1
    leak_rate: float = 0.1
    noise_rate_rn: float = 1.0
    noise_bright_factor_c: float = 0.25
    seed: int = 0
    filter_mode: str = "euler"  # or "exact": eps = 1 - exp(-2 pi f dt)

    def __post_init__(self):
        if self.theta_on <= 0 or self.theta_off <= 0:
            raise ConfigError("thresholds must be positive")
        if not 0 < self.bw_floor <= 1:
            raise ConfigError("bw_floor must be in (0, 1]")
        if not 0 < self.noise_bright_factor_c < 1:
            raise ConfigError("noise_bright_factor_c must be in (0, 1)")
        if self.leak_rate < 0 or self.noise_rate_rn < 0:
            raise ConfigError("rates must be non-negative")
        if self.sigma_theta < 0:
            raise ConfigError("sigma_theta must be non-negative")
        if self.filter_mode not in ("euler", "exact"):
            raise ConfigError(f"unknown filter_mode {self.filter_mode!r}")


@dataclass
class PixelArrayState:
    """Per-pixel simulator state over a rectangular block of the sensor.

    `pixel_index` holds absolute flat indices into the full sensor so RNG
    counters (and therefore outputs) do not depend on how rows were
    partitioned across workers.
    """

    l_mem: np.ndarray
    l_lp: np.ndarray
    theta_on_px: np.ndarray
    theta_off_px: np.ndarray
    leak_accum: np.ndarray
    pixel_index: np.ndarray
    full_width: int
    npix_total: int
    noise_key: int
    step: int = 0

    @property
    def shape(self):
        return self.l_mem.shape

    def row_slice(self, r0: int, r1: int) -> "PixelArrayState":
        """View onto rows [r0, r1); mutations write through to this state."""
        return replace(
            self,
            l_mem=self.l_mem[r0:r1],
            l_lp=self.l_lp[r0:r1],
            theta_on_px=self.theta_on_px[r0:r1],
            theta_off_px=self.theta_off_px[r0:r1],
            leak_accum=self.leak_accum[r0:r1],
            pixel_index=self.pixel_index[r0:r1],
        )


def init_state(first: LogFrame, params: V2eParams) -> PixelArrayState:
    """Start the simulator at the first frame: l_mem = l_lp = L0, thresholds
    sampled per pixel as Normal(theta_nom, sigma_theta) clamped to >= 0.01."""
    height, width = first.data.shape
    idx = np.arange(height * width, dtype=np.uint64).reshape(height, width)
    key_on = rng.derive(params.seed, rng.tag("v2e.theta.on"))
    key_off = rng.derive(params.seed, rng.tag("v2e.theta.off"))
    theta_on = np.maximum(THETA_MIN, params.theta_on + params.sigma_theta * rng.normal(key_on, idx))
    theta_off = np.maximum(THETA_MIN, params.theta_off + params.sigma_theta * rng.normal(key_off, idx))
    return PixelArrayState(
        l_mem=first.data.copy(),
        l_lp=first.data.copy(),
        theta_on_px=theta_on,
        theta_off_px=theta_off,
        leak_accum=np.zeros_like(first.data),
        pixel_index=idx.astype(np.int64),
        full_width=width,
        npix_total=height * width,
        noise_key=rng.derive(params.seed, rng.tag("v2e.noise")),
    )


def bandwidth(y_norm, params: V2eParams):
    """Cutoff frequency in Hz for normalized luma; affine floor at bw_floor."""
    return params.f3db_max * (params.bw_floor + (1.0 - params.bw_floor) * np.asarray(y_norm, dtype=np.float64))


def lowpass_step(state: PixelArrayState, target_log: np.ndarray, y_norm: np.ndarray, dt_s: float, params: V2eParams) -> None:
    """First-order IIR update of l_lp toward the new log frame."""
    if dt_s < 0:
        raise DataError("negative dt in lowpass_step")
    f_cut = params.f3db_max * (params.bw_floor + (1.0 - params.bw_floor) * y_norm)
    if params.filter_mode == "exact":
        eps = 1.0 - np.exp(-(TWO_PI * f_cut * dt_s))
    else:
        eps = np.minimum(1.0, TWO_PI * f_cut * dt_s)
    state.l_lp += eps * (target_log - state.l_lp)


def leak_step(state: PixelArrayState, dt_s: float, params: V2eParams) -> None:
    """Continuous leak decrement of l_mem.

    The decrement uses the nominal ON threshold, so a pixel's leak-event
    rate is leak_rate * theta_nom / theta_on_px: threshold mismatch spreads
    both the phase and the period of leak events across pixels.
    """
    if dt_s < 0:
        raise DataError("negative dt in leak_step")
    if params.leak_rate <= 0.0 or dt_s == 0.0:
        return
    dec = (params.leak_rate * params.theta_on) * dt_s
    state.l_mem -= dec
    state.leak_accum += dec


def emit_events(state: PixelArrayState, t0_us: int, t1_us: int) -> np.ndarray:
    """Quantize accumulated change into events with magnitude-floor counts.

    Timestamps are spaced evenly over (t0, t1]: the k-th of N events lands
    at t0 + ceil(dt * k / N).
    """
    if t1_us <= t0_us:
        raise DataError("emit_events needs t1_us > t0_us")
    delta = state.l_lp - state.l_mem
    pos = delta > 0
    neg = delta < 0
    n = np.zeros(state.shape, dtype=np.int64)
    if pos.any():
        n[pos] = np.floor(delta[pos] / state.theta_on_px[pos]).astype(np.int64)
        on_mask = n > 0
        state.l_mem[on_mask] += n[on_mask] * state.theta_on_px[on_mask]
    if neg.any():
        n[neg] = -np.floor(-delta[neg] / state.theta_off_px[neg]).astype(np.int64)
        off_mask = n < 0
        state.l_mem[off_mask] += n[off_mask] * state.theta_off_px[off_mask]
    fired = n != 0
    if not fired.any():
        return empty_events()
    counts = np.abs(n[fired])
    total = int(counts.sum())
    flat = state.pixel_index[fired]
    polarity = (n[fired] > 0).astype(np.uint8)
    # per-event rank k in 1..count, vectorized over all firing pixels
    offsets = np.cumsum(counts) - counts
    k = np.arange(1, total + 1, dtype=np.int64) - np.repeat(offsets, counts)
    cc = np.repeat(counts, counts)
    dt_us = np.int64(t1_us - t0_us)
    t = np.int64(t0_us) + (dt_us * k + cc - 1) // cc
    return make_events(
        t.astype(np.uint64),
        np.repeat(flat % state.full_width, counts).astype(np.uint16),
        np.repeat(flat // state.full_width, counts).astype(np.uint16),
        np.repeat(polarity, counts),
    )


def shot_noise_step(state: PixelArrayState, luma_norm: np.ndarray, dt_s: float, t_us: int, params: V2eParams) -> np.ndarray:
    """Bernoulli shot-noise draw for one interval; advances the noise counter.

    Rate r = R_n * (1 - (1 - c) * y_norm) interpolates from R_n in darkness
    down to c * R_n at full white. One uniform u in [0,1) is compared
    against the two thresholds [p, 1-p] with p = r * dt / 2: u < p emits an
    ON event, u > 1 - p an OFF event, so polarities are balanced and the
    total noise rate is r. Noise events reset their pixel: l_mem <- l_lp.
    """
    if dt_s < 0:
        raise DataError("negative dt in shot_noise_step")
    step = state.step
    state.step += 1
    if params.noise_rate_rn <= 0.0 or dt_s == 0.0:
        return empty_events()
    r = params.noise_rate_rn * (1.0 - (1.0 - params.noise_bright_factor_c) * luma_norm)
    if (r * dt_s > 1.0).any():
        raise DataError(f"noise probability r*dt exceeds 1 (max {(r * dt_s).max():.3f}); use a smaller frame interval")
    p = 0.5 * (r * dt_s)  # per-polarity threshold; r*dt <= 1 keeps the two disjoint
    counter = np.uint64(step) * np.uint64(state.npix_total) + state.pixel_index.astype(np.uint64)
    u = rng.uniform(state.noise_key, counter)
    on = u < p
    off = u > 1.0 - p
    hit = on | off
    if not hit.any():
        return empty_events()
    state.l_mem[hit] = state.l_lp[hit]
    flat = state.pixel_index[hit]
    return make_events(
        np.full(flat.size, t_us, dtype=np.uint64),
        (flat % state.full_width).astype(np.uint16),
        (flat // state.full_width).astype(np.uint16),
        on[hit].astype(np.uint8),
    )


def _validate_frames(frames) -> None:
    if len(frames) < 2:
        raise DataError("need at least 2 frames to generate events")
    shape = frames[0].data.shape
    last_t = None
    for k, f in enumerate(frames):
        if f.data.shape != shape:
            raise DataError(f"frame {k} shape {f.data.shape} != {shape}")
        if last_t is not None and f.t_us <= last_t:
            raise DataError(f"frame {k} timestamp {f.t_us} not strictly increasing")
        last_t = f.t_us


def _simulate_block(state: PixelArrayState, frames, r0: int, r1: int, params: V2eParams) -> list:
    chunks = []
    for i in range(1, len(frames)):
        t0 = int(frames[i - 1].t_us)
        t1 = int(frames[i].t_us)
        dt_s = (t1 - t0) / 1e6
        dn = frames[i].data[r0:r1].astype(np.float64)
        target = lin_log(dn)
        y_norm = dn / 255.0
        lowpass_step(state, target, y_norm, dt_s, params)
        leak_step(state, dt_s, params)
        ev = emit_events(state, t0, t1)
        if ev.size:
            chunks.append(ev)
        noise = shot_noise_step(state, y_norm, dt_s, t1, params)
        if noise.size:
            chunks.append(noise)
    return chunks


def convert_video(frames, params: V2eParams, threads: int = 1, state: PixelArrayState | None = None) -> np.ndarray:
    """Run the full pixel model over a frame sequence.

    Returns the globally sorted event array. Output is bit-identical for
    identical (frames, params) regardless of `threads`: pixels are
    independent, every random draw is counter-keyed by absolute pixel
    index, and the final sort is a deterministic serial step.

    A pre-built `state` (e.g. with externally chosen thresholds) may be
    supplied; by default one is initialized from the first frame.
    """
    _validate_frames(frames)
    if state is None:
        state = init_state(LogFrame(lin_log(frames[0].data.astype(np.float64)), t_us=frames[0].t_us), params)
    height = frames[0].data.shape[0]
    threads = max(1, min(int(threads), height))
    if threads == 1:
        chunks = _simulate_block(state, frames, 0, height, params)
    else:
        bounds = np.linspace(0, height, threads + 1, dtype=int)
        blocks = [(state.row_slice(a, b), int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if a < b]
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            results = list(pool.map(lambda blk: _simulate_block(blk[0], frames, blk[1], blk[2], params), blocks))
        chunks = [c for result in results for c in result]
        state.step = blocks[0][0].step
    if not chunks:
        return empty_events()
    return sort_events(np.concatenate(chunks))
