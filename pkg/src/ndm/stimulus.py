"""Random dot kinematogram (RDK) movies and the on-disk stimulus dataset.

A movie is a ``uint8`` array of shape ``(height, width, n_frames)``: black
background (0) with filled white dots (255). Dots live inside a centred
circular aperture. A fixed set of "signal" dots (the first
``round_half_up(coherence * n_dots)`` indices) steps ``speed`` pixels per
frame in the signal direction; every other dot steps at the same speed in
its own uniformly random direction. All dots are re-placed uniformly inside
the aperture on frames with ``frame % reposition_interval == 0`` and
whenever their centre leaves the aperture. Noise dots draw a new direction
each time they are re-placed.

``.rdk`` file layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"RDK\\x00"
    4       2     format version (uint16, currently 1)
    6       2     dtype code (uint16, 1 = uint8)
    8       12    dims: height, width, n_frames (3 x uint32)
    20      4     metadata length M (uint32)
    24      M     UTF-8 JSON with the generating RdkParams
    24+M    H*W*T voxel bytes, C order over (height, width, frame)
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ParameterError, PersistenceError
from .seeding import derive_seed

MAGIC = b"RDK\x00"
FORMAT_VERSION = 1
MANIFEST_VERSION = "1"
_HEADER = struct.Struct("<4sHH3II")
_DTYPE_CODES = {1: np.uint8}


class Direction(str, enum.Enum):
    LEFT = "Left"
    RIGHT = "Right"

    @property
    def sign(self) -> int:
        return 1 if self is Direction.RIGHT else -1

    @classmethod
    def parse(cls, value) -> "Direction":
        if isinstance(value, Direction):
            return value
        text = str(value).strip().lower()
        for member in cls:
            if text in (member.value.lower(), member.value[0].lower()):
                return member
        raise ParameterError("direction", f"expected Left or Right, got {value!r}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def n_signal_dots(coherence: float, n_dots: int) -> int:
    # the tiny epsilon absorbs binary representation error, e.g. 0.29 * 200
    return round_half_up(coherence * n_dots + 1e-9)


@dataclass(frozen=True)
class RdkParams:
    coherence: float = 0.5
    direction: Direction = Direction.RIGHT
    seed: int = 0
    frame_size: int = 300
    aperture_diameter: float = 270.0
    n_dots: int = 200
    dot_diameter: float = 6.0
    speed: float = 2.0
    reposition_interval: int = 4
    n_frames: int = 120

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction.parse(self.direction))
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.coherence <= 1.0 or not math.isfinite(self.coherence):
            raise ParameterError("coherence", f"must lie in [0, 1], got {self.coherence}")
        if self.frame_size <= 0:
            raise ParameterError("frame_size", "must be positive")
        if not 0 < self.aperture_diameter <= self.frame_size:
            raise ParameterError(
                "aperture_diameter",
                f"aperture of {self.aperture_diameter} px does not fit a {self.frame_size} px frame",
            )
        if self.n_dots <= 0:
            raise ParameterError("n_dots", "must be positive")
        if self.dot_diameter <= 0:
            raise ParameterError("dot_diameter", "must be positive")
        if self.speed < 0:
            raise ParameterError("speed", "must be non-negative")
        if self.reposition_interval <= 0:
            raise ParameterError("reposition_interval", "must be positive")
        if self.n_frames <= 0:
            raise ParameterError("n_frames", "must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed", "must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["direction"] = self.direction.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RdkParams":
        return cls(**d)


@dataclass
class Stimulus:
    voxels: np.ndarray  # uint8 (height, width, n_frames)
    params: RdkParams

    def __post_init__(self):
        p = self.params
        expected = (p.frame_size, p.frame_size, p.n_frames)
        if self.voxels.shape != expected or self.voxels.dtype != np.uint8:
            raise ParameterError(
                "voxels", f"expected uint8 array of shape {expected}, got {self.voxels.dtype} {self.voxels.shape}"
            )

    def frames(self) -> np.ndarray:
        """Frame-major view ``(n_frames, height, width)``."""
        return np.moveaxis(self.voxels, 2, 0)


@dataclass
class DotTrajectory:
    """Dot centres per frame, ``positions[f, i] = (x, y)``.

    ``reset[f, i]`` is True when dot ``i`` was re-placed on frame ``f``
    (always True on frame 0); ``planned[f, i]`` is the step the dot took (or
    would have taken, had it not left the aperture) going into frame ``f``.
    """

    positions: np.ndarray
    reset: np.ndarray
    planned: np.ndarray
    is_signal: np.ndarray


def _uniform_in_disk(rng, n, cx, cy, radius):
    r = radius * np.sqrt(rng.random(n))
    theta = rng.random(n) * 2.0 * np.pi
    return np.stack([cx + r * np.cos(theta), cy + r * np.sin(theta)], axis=1)


def dot_trajectory(params: RdkParams) -> DotTrajectory:
    p = params
    rng = np.random.default_rng(int(p.seed))
    n, T = p.n_dots, p.n_frames
    cx = cy = p.frame_size / 2.0
    radius = p.aperture_diameter / 2.0
    n_sig = n_signal_dots(p.coherence, n)
    is_signal = np.zeros(n, dtype=bool)
    is_signal[:n_sig] = True

    positions = np.empty((T, n, 2))
    reset = np.zeros((T, n), dtype=bool)
    planned = np.zeros((T, n, 2))

    def fresh_directions(mask):
        theta = rng.random(int(mask.sum())) * 2.0 * np.pi
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)

    step = np.zeros((n, 2))
    step[is_signal, 0] = p.direction.sign * p.speed
    noise = ~is_signal

    pos = _uniform_in_disk(rng, n, cx, cy, radius)
    step[noise] = p.speed * fresh_directions(noise)
    positions[0] = pos
    reset[0] = True

    for f in range(1, T):
        if f % p.reposition_interval == 0:
            pos = _uniform_in_disk(rng, n, cx, cy, radius)
            step[noise] = p.speed * fresh_directions(noise)
            reset[f] = True
        else:
            planned[f] = step
            pos = pos + step
            out = np.hypot(pos[:, 0] - cx, pos[:, 1] - cy) > radius
            if out.any():
                pos[out] = _uniform_in_disk(rng, int(out.sum()), cx, cy, radius)
                out_noise = out & noise
                if out_noise.any():
                    step[out_noise] = p.speed * fresh_directions(out_noise)
                reset[f] = out
        positions[f] = pos
    return DotTrajectory(positions, reset, planned, is_signal)


def render(positions: np.ndarray, frame_size: int, dot_diameter: float) -> np.ndarray:
    """Rasterise dot centres ``(T, n, 2)`` into a ``(H, W, T)`` uint8 movie.

    A pixel ``(row, col)`` is lit when ``(col - x)**2 + (row - y)**2 <= r**2``.
    """
    T, n, _ = positions.shape
    r = dot_diameter / 2.0
    reach = int(math.ceil(r)) + 1
    offs = np.arange(-reach, reach + 1)
    x = positions[..., 0].reshape(-1)
    y = positions[..., 1].reshape(-1)
    cols = np.floor(x).astype(np.int64)[:, None] + offs[None, :]
    rows = np.floor(y).astype(np.int64)[:, None] + offs[None, :]
    inside = ((cols[:, None, :] - x[:, None, None]) ** 2 + (rows[:, :, None] - y[:, None, None]) ** 2) <= r * r
    inside &= (rows[:, :, None] >= 0) & (rows[:, :, None] < frame_size)
    inside &= (cols[:, None, :] >= 0) & (cols[:, None, :] < frame_size)
    dot_idx, ri, ci = np.nonzero(inside)
    frame = dot_idx // n
    movie = np.zeros((T, frame_size, frame_size), dtype=np.uint8)
    movie[frame, rows[dot_idx, ri], cols[dot_idx, ci]] = 255
    return np.ascontiguousarray(np.moveaxis(movie, 0, 2))


def generate_stimulus(params: RdkParams) -> Stimulus:
    params.validate()
    traj = dot_trajectory(params)
    voxels = render(traj.positions, params.frame_size, params.dot_diameter)
    return Stimulus(voxels, params)


# -- persistence -------------------------------------------------------------


def stimulus_bytes(stim: Stimulus) -> bytes:
    meta = json.dumps(stim.params.to_dict(), sort_keys=True).encode("utf-8")
    h, w, t = stim.voxels.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, 1, h, w, t, len(meta))
    return header + meta + np.ascontiguousarray(stim.voxels).tobytes()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_stimulus(stim: Stimulus, path) -> str:
    """Write ``stim`` to ``path`` and return the file's SHA-256 checksum."""
    data = stimulus_bytes(stim)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise PersistenceError(path, f"cannot write stimulus: {exc}") from exc
    return sha256_bytes(data)


def parse_stimulus(data: bytes, path="<bytes>") -> Stimulus:
    if len(data) < _HEADER.size:
        raise FormatError(path, "file shorter than header")
    magic, version, dtype_code, h, w, t, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(path, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported format version {version}")
    if dtype_code not in _DTYPE_CODES:
        raise FormatError(path, f"unknown dtype code {dtype_code}")
    start = _HEADER.size + meta_len
    if len(data) != start + h * w * t:
        raise FormatError(path, f"expected {start + h * w * t} bytes, found {len(data)}")
    try:
        params = RdkParams.from_dict(json.loads(data[_HEADER.size:start].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(path, f"bad metadata block: {exc}") from exc
    voxels = np.frombuffer(data, dtype=np.uint8, offset=start).reshape(h, w, t).copy()
    try:
        return Stimulus(voxels, params)
    except ParameterError as exc:
        raise FormatError(path, str(exc)) from exc


def load_stimulus(path, manifest: "DatasetManifest | None" = None) -> Stimulus:
    """Load a ``.rdk`` file, verifying its checksum against ``manifest``.

    When no manifest is given, a ``manifest.json`` next to the file is used
    if present.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(path, f"cannot read stimulus: {exc}") from exc
    if manifest is None and (path.parent / MANIFEST_NAME).exists():
        manifest = DatasetManifest.load(path.parent)
    if manifest is not None:
        entry = manifest.entry_for(path)
        if entry is not None and sha256_bytes(data) != entry.checksum:
            raise CorruptionError(path, "checksum does not match manifest")
    return parse_stimulus(data, path)


# -- dataset -----------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
DEFAULT_COHERENCES = tuple(round(0.01 * i, 2) for i in range(100))
DEFAULT_REPEATS = 10


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    coherence: float
    direction: str
    repeat: int
    seed: int
    checksum: str = ""


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    format_version: str = MANIFEST_VERSION
    master_seed: int = 0
    root: Path | None = None

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "master_seed": self.master_seed,
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self, root) -> Path:
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        except OSError as exc:
            raise PersistenceError(path, f"cannot write manifest: {exc}") from exc
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise PersistenceError(path, "dataset manifest not found") from exc
        except (OSError, ValueError) as exc:
            raise FormatError(path, f"unreadable manifest: {exc}") from exc
        entries = [ManifestEntry(**e) for e in raw["entries"]]
        return cls(entries, raw["format_version"], raw.get("master_seed", 0), root)

    def entry_for(self, path) -> ManifestEntry | None:
        name = Path(path).name
        for e in self.entries:
            if Path(e.path).name == name:
                return e
        return None

    def select(self, coherences=None, repeats=None) -> list:
        chosen = self.entries
        if coherences is not None:
            wanted = {round(float(c), 6) for c in coherences}
            chosen = [e for e in chosen if round(e.coherence, 6) in wanted]
        if repeats is not None:
            chosen = [e for e in chosen if e.repeat < repeats]
        return chosen

    def verify(self) -> list:
        """Return the entries whose files are missing or fail their checksum."""
        bad = []
        for e in self.entries:
            p = Path(self.root or ".") / e.path
            try:
                ok = sha256_bytes(p.read_bytes()) == e.checksum
            except OSError:
                ok = False
            if not ok:
                bad.append(e)
        return bad


def stimulus_seed(master_seed: int, coherence: float, direction, repeat: int) -> int:
    key = round_half_up(float(coherence) * 10000)
    return derive_seed(master_seed, "stimulus", key, Direction.parse(direction).value, int(repeat))


def entry_name(coherence: float, direction, repeat: int) -> str:
    d = Direction.parse(direction).value[0]
    return f"coh{round_half_up(coherence * 10000):05d}_{d}_r{repeat:02d}.rdk"


def plan_dataset(coherences=DEFAULT_COHERENCES, repeats=DEFAULT_REPEATS, seed=0) -> DatasetManifest:
    """The manifest ``build_dataset`` would write, without checksums."""
    coherences = list(coherences)
    if not coherences:
        raise ParameterError("coherences", "must be non-empty")
    if repeats <= 0:
        raise ParameterError("repeats", "must be positive")
    entries = []
    for c in coherences:
        RdkParams(coherence=float(c))  # range check
        for d in (Direction.LEFT, Direction.RIGHT):
            for r in range(repeats):
                entries.append(
                    ManifestEntry(entry_name(c, d, r), float(c), d.value, r, stimulus_seed(seed, c, d, r))
                )
    return DatasetManifest(entries, MANIFEST_VERSION, int(seed))


def params_for(entry: ManifestEntry, base: RdkParams | None = None) -> RdkParams:
    base = base or RdkParams()
    d = base.to_dict()
    d.update(coherence=entry.coherence, direction=entry.direction, seed=entry.seed)
    return RdkParams.from_dict(d)


def build_dataset(root, coherences=DEFAULT_COHERENCES, repeats=DEFAULT_REPEATS, seed=0,
                  base: RdkParams | None = None, workers: int = 1) -> DatasetManifest:
    root = Path(root)
    plan = plan_dataset(coherences, repeats, seed)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(root, f"cannot create dataset root: {exc}") from exc

    def make(entry):
        stim = generate_stimulus(params_for(entry, base))
        return save_stimulus(stim, root / entry.path)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            checksums = list(pool.map(make, plan.entries))
    else:
        checksums = [make(e) for e in plan.entries]
    entries = [ManifestEntry(**{**asdict(e), "checksum": c}) for e, c in zip(plan.entries, checksums)]
    manifest = DatasetManifest(entries, MANIFEST_VERSION, int(seed), root)
    manifest.save(root)
    return manifest
