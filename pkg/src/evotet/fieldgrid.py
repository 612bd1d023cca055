"""Multi-resolution grid-encoded field with an MLP head and exact analytic gradients.

A field maps points in [0,1]^3 to `output_dim` values.  Per level, the point
is trilinearly interpolated from a feature table indexed either densely (when
the level's vertex grid fits in the table) or through a spatial hash; the
concatenated per-level features feed a small leaky-rectifier MLP.  All
parameters live in one flat float64 vector so optimizer and checkpoint code
never have to know the internal layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError

# Spatial hash primes (x prime is 1 so axis-aligned coherence survives).
_HASH_PRIMES = (np.uint32(1), np.uint32(2654435761), np.uint32(805459861))

GRID_INIT_SCALE = 1e-4
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 4
    base_resolution: int = 4
    growth_factor: float = 2.0
    features_per_level: int = 2
    table_size: int = 2 ** 14
    mlp_hidden: tuple[int, ...] = (32, 32)
    output_dim: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError(f"levels must be >= 1, got {self.levels}")
        if self.table_size < 1 or (self.table_size & (self.table_size - 1)) != 0:
            raise ConfigurationError(f"table_size must be a power of two, got {self.table_size}")
        if self.output_dim < 1:
            raise ConfigurationError(f"output_dim must be >= 1, got {self.output_dim}")
        if self.base_resolution < 1:
            raise ConfigurationError(f"base_resolution must be >= 1, got {self.base_resolution}")
        if self.growth_factor <= 1.0:
            raise ConfigurationError(f"growth_factor must be > 1, got {self.growth_factor}")
        object.__setattr__(self, "mlp_hidden", tuple(int(w) for w in self.mlp_hidden))

    def level_resolution(self, level: int) -> int:
        """Cells per axis at `level`."""
        return max(1, int(np.floor(self.base_resolution * self.growth_factor ** level + 1e-9)))

    def level_is_dense(self, level: int) -> bool:
        r = self.level_resolution(level) + 1
        return r ** 3 <= self.table_size

    @property
    def grid_param_count(self) -> int:
        return self.levels * self.table_size * self.features_per_level

    @property
    def mlp_layout(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, input = concatenated level features."""
        dims = [self.levels * self.features_per_level, *self.mlp_hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        n = self.grid_param_count
        for fi, fo in self.mlp_layout:
            n += fi * fo + fo
        return n


@dataclass
class FieldParams:
    config: FieldConfig
    values: np.ndarray  # flat float64, length config.param_count

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.config.param_count,):
            raise ContractError(
                f"parameter vector length {self.values.shape} does not match "
                f"config count {self.config.param_count}")

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, self.values.copy())

    def level_table(self, level: int) -> np.ndarray:
        """(table_size, F) view into the flat vector for one level."""
        c = self.config
        n = c.table_size * c.features_per_level
        return self.values[level * n:(level + 1) * n].reshape(c.table_size, c.features_per_level)

    def mlp_layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(W, b) views for layer i; W has shape (fan_in, fan_out)."""
        c = self.config
        off = c.grid_param_count
        for j, (fi, fo) in enumerate(c.mlp_layout):
            if j == i:
                w = self.values[off:off + fi * fo].reshape(fi, fo)
                b = self.values[off + fi * fo:off + fi * fo + fo]
                return w, b
            off += fi * fo + fo
        raise ContractError(f"no MLP layer {i}")


def field_init(config: FieldConfig, seed: int) -> FieldParams:
    """Deterministic init: grid features uniform in [-1e-4, 1e-4], MLP fan-in-scaled uniform."""
    rng = np.random.Generator(np.random.PCG64(seed))
    vals = np.empty(config.param_count, dtype=np.float64)
    g = config.grid_param_count
    vals[:g] = rng.uniform(-GRID_INIT_SCALE, GRID_INIT_SCALE, size=g)
    off = g
    for fi, fo in config.mlp_layout:
        bound = 1.0 / np.sqrt(fi)
        vals[off:off + fi * fo] = rng.uniform(-bound, bound, size=fi * fo)
        off += fi * fo
        vals[off:off + fo] = rng.uniform(-bound, bound, size=fo)
        off += fo
    return FieldParams(config, vals)


# Corner offsets of a cell, in (z, y, x) bit order: corner c has bit d set if
# it is the upper corner along axis d.
_CORNERS = np.array([[(c >> d) & 1 for d in range(3)] for c in range(8)], dtype=np.int64)


def _corner_indices(config: FieldConfig, level: int, keys: np.ndarray) -> np.ndarray:
    """Map integer vertex keys (N,3) to table slots for one level."""
    r = config.level_resolution(level) + 1
    if config.level_is_dense(level):
        return keys[:, 0] + r * (keys[:, 1] + r * keys[:, 2])
    k = keys.astype(np.uint32)
    h = k[:, 0] * _HASH_PRIMES[0] ^ k[:, 1] * _HASH_PRIMES[1] ^ k[:, 2] * _HASH_PRIMES[2]
    return (h & np.uint32(config.table_size - 1)).astype(np.int64)


class _FieldTape:
    """Intermediates retained by a forward pass for the exact backward pass."""

    __slots__ = ("points", "level_idx", "level_frac", "level_i0", "features", "acts", "preacts")

    def __init__(self):
        self.level_idx = []   # per level: (N, 8) table slots
        self.level_frac = []  # per level: (N, 3) in-cell fractions
        self.level_i0 = []    # per level: (N, 3) lower corner keys
        self.acts = []        # MLP activations, acts[0] = concatenated features
        self.preacts = []     # pre-activation values of hidden layers


def _forward(params: FieldParams, points: np.ndarray, tape: _FieldTape | None) -> np.ndarray:
    c = params.config
    if not np.all(np.isfinite(params.values)):
        raise NumericError("field parameters contain NaN/Inf")
    p = np.clip(np.asarray(points, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    n = p.shape[0]
    feats = np.empty((n, c.levels * c.features_per_level), dtype=np.float64)
    for lv in range(c.levels):
        r = c.level_resolution(lv)
        x = p * r
        i0 = np.minimum(np.floor(x).astype(np.int64), r - 1)
        frac = x - i0
        table = params.level_table(lv)
        acc = np.zeros((n, c.features_per_level), dtype=np.float64)
        idx8 = np.empty((n, 8), dtype=np.int64)
        for ci in range(8):
            corner = _CORNERS[ci]
            keys = i0 + corner
            idx = _corner_indices(c, lv, keys)
            idx8[:, ci] = idx
            w = np.prod(np.where(corner.astype(bool), frac, 1.0 - frac), axis=1)
            acc += w[:, None] * table[idx]
        feats[:, lv * c.features_per_level:(lv + 1) * c.features_per_level] = acc
        if tape is not None:
            tape.level_idx.append(idx8)
            tape.level_frac.append(frac)
            tape.level_i0.append(i0)
    h = feats
    if tape is not None:
        tape.points = p
        tape.acts.append(h)
    n_layers = len(c.mlp_layout)
    for i in range(n_layers):
        w, b = params.mlp_layer(i)
        z = h @ w + b
        if i < n_layers - 1:
            h = np.where(z >= 0.0, z, LEAKY_SLOPE * z)
            if tape is not None:
                tape.preacts.append(z)
                tape.acts.append(h)
        else:
            h = z
    return h


def field_eval(params: FieldParams, points: np.ndarray) -> np.ndarray:
    """Evaluate the field at (N,3) points in [0,1]^3 (clamped); returns (N, output_dim)."""
    return _forward(params, points, None)


def field_eval_with_tape(params: FieldParams, points: np.ndarray) -> tuple[np.ndarray, _FieldTape]:
    tape = _FieldTape()
    out = _forward(params, points, tape)
    return out, tape


def field_backward(params: FieldParams, points: np.ndarray,
                   output_gradient: np.ndarray,
                   tape: _FieldTape | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact reverse-mode gradients of sum(output_gradient * field_eval).

    Returns (param_gradient, point_gradient) with shapes matching the flat
    parameter vector and the (N,3) point batch.  Point gradients are zero in
    directions clamped at the domain boundary and are one-sided at cell faces.
    """
    c = params.config
    if tape is None:
        _, tape = field_eval_with_tape(params, points)
    g_out = np.asarray(output_gradient, dtype=np.float64).reshape(-1, c.output_dim)
    n = tape.points.shape[0]
    if g_out.shape[0] != n:
        raise ContractError(f"output_gradient rows {g_out.shape[0]} != point count {n}")

    pgrad = np.zeros_like(params.values)
    n_layers = len(c.mlp_layout)
    # MLP backward; views into pgrad mirror the views used by FieldParams.
    gp = FieldParams(c, pgrad)
    g = g_out
    for i in range(n_layers - 1, -1, -1):
        w, _ = params.mlp_layer(i)
        gw, gb = gp.mlp_layer(i)
        if i < n_layers - 1:
            z = tape.preacts[i]
            g = g * np.where(z >= 0.0, 1.0, LEAKY_SLOPE)
        gw += tape.acts[i].T @ g
        gb += g.sum(axis=0)
        g = g @ w.T

    # g is now the gradient at the concatenated features.
    point_grad = np.zeros((n, 3), dtype=np.float64)
    inside = (points.reshape(-1, 3) >= 0.0) & (points.reshape(-1, 3) <= 1.0)
    for lv in range(c.levels):
        r = c.level_resolution(lv)
        frac = tape.level_frac[lv]
        idx8 = tape.level_idx[lv]
        table = params.level_table(lv)
        gtab = gp.level_table(lv)
        gfeat = g[:, lv * c.features_per_level:(lv + 1) * c.features_per_level]
        for ci in range(8):
            corner = _CORNERS[ci]
            t = np.where(corner.astype(bool), frac, 1.0 - frac)  # (N,3)
            w = np.prod(t, axis=1)
            np.add.at(gtab, idx8[:, ci], w[:, None] * gfeat)
            # d w / d frac_d = sign * prod of the other two axis terms
            fdot = np.einsum("nf,nf->n", table[idx8[:, ci]], gfeat)
            for d in range(3):
                others = t[:, [a for a in range(3) if a != d]].prod(axis=1)
                sign = 1.0 if corner[d] else -1.0
                point_grad[:, d] += sign * others * fdot * r
    point_grad *= inside
    return pgrad, point_grad


@dataclass
class MaterialSample:
    """Appearance-field outputs mapped to bounded material channels."""
    albedo: np.ndarray      # (N,3) in (0,1)
    roughness: np.ndarray   # (N,) in (0,1)
    metalness: np.ndarray   # (N,) in (0,1)
    normal_delta: np.ndarray  # (N,3) in (-1,1), world-space shading-normal offset


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def appearance_transform(raw: np.ndarray) -> MaterialSample:
    """Squash raw appearance-field outputs: logistic for albedo/roughness/metalness,
    tanh-bounded offset for the shading normal (unit length after composition with
    the geometric normal, which happens at shading time)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[1] < 5:
        raise ContractError(f"appearance field needs output_dim >= 5, got {raw.shape[1]}")
    nd = np.tanh(raw[:, 5:8]) if raw.shape[1] >= 8 else np.zeros((raw.shape[0], 3))
    return MaterialSample(
        albedo=_sigmoid(raw[:, 0:3]),
        roughness=_sigmoid(raw[:, 3]),
        metalness=_sigmoid(raw[:, 4]),
        normal_delta=nd,
    )


def appearance_transform_backward(raw: np.ndarray, g_albedo, g_roughness,
                                  g_metalness, g_normal_delta) -> np.ndarray:
    """Gradient of the squashing map back onto the raw field outputs."""
    raw = np.asarray(raw, dtype=np.float64)
    g = np.zeros_like(raw)
    s = _sigmoid(raw[:, 0:5])
    ds = s * (1.0 - s)
    g[:, 0:3] = np.asarray(g_albedo) * ds[:, 0:3]
    g[:, 3] = np.asarray(g_roughness) * ds[:, 3]
    g[:, 4] = np.asarray(g_metalness) * ds[:, 4]
    if raw.shape[1] >= 8:
        g[:, 5:8] = np.asarray(g_normal_delta) * (1.0 - np.tanh(raw[:, 5:8]) ** 2)
    return g


# ---------------------------------------------------------------------------
# Checkpoint I/O: little-endian binary, magic "TFLD", version, config, f32 params.

_CKPT_MAGIC = b"TFLD"
_CKPT_VERSION = 1


def save_field(path, params: FieldParams) -> None:
    c = params.config
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<5I", c.levels, c.base_resolution, c.features_per_level,
                             c.table_size, c.output_dim))
        fh.write(struct.pack("<d", c.growth_factor))
        fh.write(struct.pack("<I", len(c.mlp_hidden)))
        for w in c.mlp_hidden:
            fh.write(struct.pack("<I", w))
        fh.write(params.values.astype("<f4").tobytes())


def load_field(path) -> FieldParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ContractError(f"{path}: not a field checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        levels, base, feat, table, out = struct.unpack("<5I", fh.read(20))
        (growth,) = struct.unpack("<d", fh.read(8))
        (nh,) = struct.unpack("<I", fh.read(4))
        hidden = struct.unpack(f"<{nh}I", fh.read(4 * nh)) if nh else ()
        config = FieldConfig(levels=levels, base_resolution=base, growth_factor=growth,
                             features_per_level=feat, table_size=table,
                             mlp_hidden=hidden, output_dim=out)
        vals = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    return FieldParams(config, vals)
