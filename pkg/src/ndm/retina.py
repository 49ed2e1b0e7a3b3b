"""Stimulus movie -> LGN ON/OFF input currents.

The pipeline is linear and causal:

1. correlate every frame with a 9x9 difference-of-Gaussians kernel sampled
   on [-0.175, 0.175] deg, zero-padded, evaluated at stride 3 (100x100 cells,
   cell ``(i, j)`` centred on pixel ``(3i + 1, 3j + 1)``);
2. hold each 60 Hz frame over the 2 ms steps it covers (120 -> 1000 steps);
3. filter causally with an 80-tap (160 ms) biphasic temporal kernel, one per
   cell class. OFF cells see the sign-inverted spatial response.

Drive is in pA: the temporal kernels are divided by the peak of the sampled
ON kernel and the result is scaled by ``drive_gain``.

``lgn-drive`` binary layout (little-endian)::

    b"LGND" | uint16 version | uint16 reserved | uint32 rows, cols, steps
    float32 ON[steps, rows, cols] | float32 OFF[steps, rows, cols]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, PersistenceError, ShapeError
from .stimulus import Stimulus

ON, OFF = "ON", "OFF"


@dataclass(frozen=True)
class SpatialKernel:
    alpha: float = 1.0
    beta: float = 1.0
    sigma_alpha: float = 0.0894
    sigma_beta: float = 0.1259
    size: int = 9
    half_extent: float = 0.175  # deg

    def grid(self) -> np.ndarray:
        return np.linspace(-self.half_extent, self.half_extent, self.size)

    def sample(self) -> np.ndarray:
        """The ``size x size`` kernel, indexed ``[row (y), col (x)]``."""
        g = self.grid()
        return spatial_kernel_eval(g[None, :], g[:, None], self)


@dataclass(frozen=True)
class TemporalKernel:
    tau0: float = 3.66
    tau1: float = 7.16
    alpha: float = 1.0
    beta_on: float = 0.8
    beta_off: float = 1.0
    window_ms: float = 160.0
    dt_ms: float = 2.0

    def beta(self, cell_class: str) -> float:
        return {ON: self.beta_on, OFF: self.beta_off}[cell_class]

    @property
    def n_taps(self) -> int:
        return int(round(self.window_ms / self.dt_ms))

    def sample(self, cell_class: str) -> np.ndarray:
        t = np.arange(self.n_taps) * self.dt_ms
        return temporal_kernel_eval(t, cell_class, self)


@dataclass(frozen=True)
class RetinaParams:
    spatial: SpatialKernel = SpatialKernel()
    temporal: TemporalKernel = TemporalKernel()
    stride: int = 3
    drive_gain: float = 1.7  # pA at the ON kernel peak per unit spatial response
    n_steps: int = 1000
    frame_rate_hz: float = 60.0


def spatial_kernel_eval(x, y, k: SpatialKernel = SpatialKernel()):
    r2 = np.asarray(x, dtype=float) ** 2 + np.asarray(y, dtype=float) ** 2
    center = k.alpha / (np.pi * k.sigma_alpha**2) * np.exp(-r2 / k.sigma_alpha**2)
    surround = k.beta / (np.pi * k.sigma_beta**2) * np.exp(-r2 / k.sigma_beta**2)
    return center - surround


def temporal_kernel_eval(t, cell_class: str = ON, k: TemporalKernel = TemporalKernel()):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("temporal kernel is only defined for t >= 0")
    beta = k.beta(cell_class)
    fast = t**6 / k.tau0**7 * np.exp(-t / k.tau0)
    slow = t**6 / k.tau1**7 * np.exp(-t / k.tau1)
    return k.alpha * fast - beta * slow


@dataclass
class LgnDrive:
    """ON/OFF drive currents, stored time-major ``(steps, rows, cols)``.

    ``on_current`` / ``off_current`` expose them as ``(rows, cols, steps)``.
    """

    on: np.ndarray
    off: np.ndarray
    dt_ms: float = 2.0

    @property
    def on_current(self) -> np.ndarray:
        return np.moveaxis(self.on, 0, 2)

    @property
    def off_current(self) -> np.ndarray:
        return np.moveaxis(self.off, 0, 2)

    @property
    def n_steps(self) -> int:
        return self.on.shape[0]

    @property
    def lattice(self) -> tuple:
        return self.on.shape[1:]

    def flat(self) -> np.ndarray:
        """``(steps, 2 * rows * cols)`` float32: ON cells then OFF cells, row-major."""
        n = self.on.shape[1] * self.on.shape[2]
        out = np.empty((self.n_steps, 2 * n), dtype=np.float32)
        out[:, :n] = self.on.reshape(self.n_steps, n)
        out[:, n:] = self.off.reshape(self.n_steps, n)
        return out

    @classmethod
    def zeros(cls, rows=100, cols=100, steps=1000, dt_ms=2.0) -> "LgnDrive":
        z = np.zeros((steps, rows, cols), dtype=np.float32)
        return cls(z, z.copy(), dt_ms)


def spatial_response(frames: np.ndarray, params: RetinaParams = RetinaParams()) -> np.ndarray:
    """Correlate ``(T, H, W)`` frames (values in [0, 1]) with the DoG kernel at the lattice stride."""
    kern = params.spatial.sample()
    size = kern.shape[0]
    s = params.stride
    T, H, W = frames.shape
    rows, cols = H // s, W // s
    half = size // 2
    off = s // 2  # lattice cell centre inside its stride block
    pad = half
    padded = np.zeros((T, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    padded[:, pad:pad + H, pad:pad + W] = frames
    out = np.zeros((T, rows, cols))
    for a in range(size):
        r0 = off + a  # padded row of tap a for cell 0
        for b in range(size):
            c0 = off + b
            out += kern[a, b] * padded[:, r0:r0 + s * rows:s, c0:c0 + s * cols:s]
    return out


def frame_index(n_steps: int, n_frames: int, dt_ms: float, frame_rate_hz: float) -> np.ndarray:
    """Frame on screen at each step start ``t = n * dt`` (sample-and-hold)."""
    idx = np.floor(np.arange(n_steps) * dt_ms * frame_rate_hz / 1000.0 + 1e-9).astype(np.int64)
    return np.minimum(idx, n_frames - 1)


def temporal_operator(cell_class: str, n_frames: int, params: RetinaParams = RetinaParams()) -> np.ndarray:
    """Matrix ``M`` (steps x frames) so that drive = ``M @ per_frame_response``."""
    tk = params.temporal
    k = tk.sample(cell_class) / tk.sample(ON).max()
    fidx = frame_index(params.n_steps, n_frames, tk.dt_ms, params.frame_rate_hz)
    M = np.zeros((params.n_steps, n_frames))
    for lag, w in enumerate(k):
        if w == 0.0:
            continue
        n = np.arange(lag, params.n_steps)
        np.add.at(M, (n, fidx[n - lag]), w)
    return M


def compute_lgn_drive(stim: Stimulus, params: RetinaParams = RetinaParams()) -> LgnDrive:
    if stim.voxels.ndim != 3:
        raise ShapeError("stimulus must be a 3-D movie")
    H, W, T = stim.voxels.shape
    if H % params.stride or W % params.stride or H != W:
        raise ShapeError(f"stimulus of shape {stim.voxels.shape} does not tile a square lattice at stride {params.stride}")
    frames = stim.frames().astype(np.float64) / 255.0
    return drive_from_frames(frames, params)


def drive_from_frames(frames: np.ndarray, params: RetinaParams = RetinaParams()) -> LgnDrive:
    """Drive for a ``(T, H, W)`` float movie with values in [0, 1]."""
    T = frames.shape[0]
    resp = spatial_response(frames, params)  # (T, rows, cols)
    rows, cols = resp.shape[1:]
    flat = resp.reshape(T, -1)
    g = params.drive_gain
    on = (temporal_operator(ON, T, params) @ flat) * g
    off = (temporal_operator(OFF, T, params) @ (-flat)) * g
    shape = (params.n_steps, rows, cols)
    return LgnDrive(on.reshape(shape).astype(np.float32), off.reshape(shape).astype(np.float32),
                    params.temporal.dt_ms)


_DRIVE_HEADER = struct.Struct("<4sHH3I")


def save_drive(drive: LgnDrive, path) -> None:
    steps, rows, cols = drive.on.shape
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_DRIVE_HEADER.pack(b"LGND", 1, 0, rows, cols, steps))
            fh.write(np.ascontiguousarray(drive.on, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(drive.off, dtype="<f4").tobytes())
    except OSError as exc:
        raise PersistenceError(path, f"cannot write drive: {exc}") from exc


def load_drive(path) -> LgnDrive:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(path, f"cannot read drive: {exc}") from exc
    if len(data) < _DRIVE_HEADER.size:
        raise FormatError(path, "file shorter than header")
    magic, version, _, rows, cols, steps = _DRIVE_HEADER.unpack_from(data)
    if magic != b"LGND" or version != 1:
        raise FormatError(path, "not an LGN drive file")
    n = rows * cols * steps
    if len(data) != _DRIVE_HEADER.size + 8 * n:
        raise FormatError(path, "truncated drive file")
    arr = np.frombuffer(data, dtype="<f4", offset=_DRIVE_HEADER.size).reshape(2, steps, rows, cols)
    return LgnDrive(arr[0].astype(np.float32), arr[1].astype(np.float32))
