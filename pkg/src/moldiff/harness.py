"""Dataset ingestion, run configuration, checkpoints, and random streams.

File formats owned here:

* extended XYZ — one block per molecule: atom count, a comment line that
  may carry ``prop:<name>=<float>`` tokens, then ``Element x y z [charge]``
  rows in Angstrom;
* run config — ``key = value`` lines with ``#`` comments;
* checkpoint — little-endian binary starting with the magic ``MDMCKPT1``,
  then a config echo, the molecule-size histogram, property statistics,
  and named float64 parameter blocks.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import DEFAULT_ELEMENTS, MolecularGeometry, zero_com
from .params import ModelParams, from_blocks, to_blocks
from .schedule import NoiseSchedule, make_schedule
from .score_net import NetConfig, init_model
from .training import TrainConfig

CHECKPOINT_MAGIC = b"MDMCKPT1"

#: Named sub-streams hanging off the single run seed.
RNG_STREAMS = {"init": 0, "shuffle": 1, "noise": 2, "zv": 3, "sampler": 4,
               "data": 5, "regressor": 6, "eval": 7}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose, derived from the seed."""
    return np.random.default_rng([RNG_STREAMS[name], int(seed)])


# -- run configuration --------------------------------------------------------

@dataclass
class RunConfig:
    """Every tunable of the engine, as written in a config file."""

    # schedule
    T: int = 1000
    beta_schedule: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    sigma_mode: str = "posterior"
    # score network
    hidden_dim: int = 128
    n_layers: int = 4
    rbf_count: int = 64
    rbf_cutoff: float = 10.0
    time_embed_dim: int = 32
    tau: float = 2.0
    literal_coord_embed: bool = False
    condition_name: str = ""
    # variational noising
    zv_dim: int = 8
    zv_prior: str = "uniform"
    standard_reparam: bool = False
    kl_weight: float = 1.0
    # training
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    gamma_weighting: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 500
    max_steps: int = 0
    # run
    elements: tuple[str, ...] = DEFAULT_ELEMENTS
    data_path: str = ""
    out_dir: str = "."
    seed: int = 0
    single_bonds_only: bool = False

    def net_config(self) -> NetConfig:
        return NetConfig(
            elements=self.elements, hidden_dim=self.hidden_dim,
            n_layers=self.n_layers, rbf_count=self.rbf_count,
            rbf_cutoff=self.rbf_cutoff, time_embed_dim=self.time_embed_dim,
            tau=self.tau, literal_coord_embed=self.literal_coord_embed,
            condition_dim=1 if self.condition_name else 0, zv_dim=self.zv_dim,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed,
            gamma_weighting=self.gamma_weighting, kl_weight=self.kl_weight,
            standard_reparam=self.standard_reparam,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps, checkpoint_interval=self.checkpoint_interval,
            max_steps=self.max_steps or None,
        )

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.beta_schedule, self.T, self.beta_min,
                             self.beta_max, sigma_mode=self.sigma_mode)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "elements":
                value = ",".join(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_BOOL_WORDS = {"true": True, "on": True, "yes": True, "1": True,
               "false": False, "off": False, "no": False, "0": False}


def _parse_value(name: str, raw: str, kind):
    if kind is bool:
        if raw.lower() not in _BOOL_WORDS:
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if name == "elements":
        symbols = tuple(s for chunk in raw.split(",") for s in chunk.split() if s)
        if not symbols:
            raise ValueError("elements: empty element list")
        return symbols
    return raw


_RANGE_CHECKS = {
    "T": lambda v: v >= 1,
    "beta_schedule": lambda v: v in ("linear", "polynomial"),
    "sigma_mode": lambda v: v in ("posterior", "beta"),
    "hidden_dim": lambda v: v >= 2,
    "n_layers": lambda v: v >= 0,
    "rbf_count": lambda v: v >= 1,
    "rbf_cutoff": lambda v: v > 0,
    "time_embed_dim": lambda v: v >= 2 and v % 2 == 0,
    "tau": lambda v: v > 0,
    "zv_dim": lambda v: v >= 1,
    "zv_prior": lambda v: v in ("gaussian", "uniform"),
    "kl_weight": lambda v: v >= 0,
    "learning_rate": lambda v: v > 0,
    "batch_size": lambda v: v >= 1,
    "epochs": lambda v: v >= 1,
    "adam_beta1": lambda v: 0 < v < 1,
    "adam_beta2": lambda v: 0 < v < 1,
    "adam_eps": lambda v: v > 0,
    "checkpoint_interval": lambda v: v >= 1,
    "max_steps": lambda v: v >= 0,
}


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines into a validated RunConfig.

    Every problem is collected and reported in a single error, so a bad
    config fails with the complete list of offending keys.
    """
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kinds = {name: type(getattr(RunConfig(), name)) for name in fields}
    values = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            value = _parse_value(key, raw, kinds[key])
        except ValueError as exc:
            errors.append(f"line {lineno}: {exc}")
            continue
        check = _RANGE_CHECKS.get(key)
        if check is not None and not check(value):
            errors.append(f"line {lineno}: {key} = {raw} out of range")
            continue
        values[key] = value
    beta_min = values.get("beta_min", RunConfig.beta_min)
    beta_max = values.get("beta_max", RunConfig.beta_max)
    if not (0 < beta_min <= beta_max < 1):
        errors.append("invalid beta range: need 0 < beta_min <= beta_max < 1")
    if errors:
        raise ValueError("invalid config:\n  " + "\n  ".join(errors))
    return RunConfig(**values)


def load_config(path: str) -> RunConfig:
    with open(path) as handle:
        return parse_config(handle.read())


# -- datasets -----------------------------------------------------------------

@dataclass
class Dataset:
    """Parsed molecules plus the statistics the trainer and sampler need."""

    molecules: list[MolecularGeometry]
    properties: list[dict[str, float]]
    size_histogram: dict[int, int]
    property_stats: dict[str, tuple[float, float]]

    def __len__(self) -> int:
        return len(self.molecules)

    def training_items(self, condition_name: str = ""):
        """(geometry, condition) pairs; condition is None when the run is
        unconditional."""
        if not condition_name:
            return [(g, None) for g in self.molecules]
        mean, std = self.property_stats[condition_name]
        items = []
        for geom, props in zip(self.molecules, self.properties):
            if condition_name not in props:
                raise ValueError(f"molecule missing property {condition_name!r}")
            items.append((geom, (props[condition_name] - mean) / (std or 1.0)))
        return items


def _dataset_from_molecules(molecules, properties) -> Dataset:
    histogram: dict[int, int] = {}
    for geom in molecules:
        histogram[geom.n] = histogram.get(geom.n, 0) + 1
    names = sorted({name for props in properties for name in props})
    stats = {}
    for name in names:
        vals = np.array([p[name] for p in properties if name in p])
        stats[name] = (float(vals.mean()), float(vals.std()))
    return Dataset(molecules=molecules, properties=properties,
                   size_histogram=histogram, property_stats=stats)


def parse_xyz(text: str, elements=DEFAULT_ELEMENTS, source: str = "<string>"):
    """Parse extended-XYZ text into (molecules, per-molecule properties)."""
    element_index = {el: k for k, el in enumerate(elements)}
    lines = text.splitlines()
    molecules, properties = [], []
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise ValueError(f"{source} line {pos + 1}: expected an atom count, "
                             f"got {lines[pos]!r}") from None
        if n < 1:
            raise ValueError(f"{source} line {pos + 1}: atom count must be positive")
        if pos + 2 + n > len(lines):
            raise ValueError(f"{source} line {pos + 1}: truncated block "
                             f"(expected {n} atom lines)")
        comment = lines[pos + 1] if pos + 1 < len(lines) else ""
        props = {}
        for token in comment.split():
            if token.startswith("prop:") and "=" in token:
                name, _, raw = token[5:].partition("=")
                try:
                    props[name] = float(raw)
                except ValueError:
                    raise ValueError(f"{source} line {pos + 2}: bad property "
                                     f"token {token!r}") from None
        feats = np.zeros((n, len(elements) + 1))
        coords = np.zeros((n, 3))
        for k in range(n):
            lineno = pos + 2 + k
            if lineno >= len(lines):
                raise ValueError(f"{source} line {lineno + 1}: truncated block")
            parts = lines[lineno].split()
            if len(parts) not in (4, 5):
                raise ValueError(f"{source} line {lineno + 1}: expected "
                                 f"'Element x y z [charge]', got {lines[lineno]!r}")
            symbol = parts[0]
            if symbol not in element_index:
                raise ValueError(f"{source} line {lineno + 1}: unknown element "
                                 f"{symbol!r}")
            try:
                xyz = [float(v) for v in parts[1:4]]
                charge = float(parts[4]) if len(parts) == 5 else 0.0
            except ValueError:
                raise ValueError(f"{source} line {lineno + 1}: bad number in "
                                 f"{lines[lineno]!r}") from None
            feats[k, element_index[symbol]] = 1.0
            feats[k, -1] = charge
            coords[k] = xyz
        molecules.append(MolecularGeometry(feats, coords, tuple(elements)))
        properties.append(props)
        pos += 2 + n
    return molecules, properties


def load_dataset(path: str, elements=DEFAULT_ELEMENTS) -> Dataset:
    """Read an extended-XYZ file; molecules come out zero-COM centered."""
    with open(path) as handle:
        text = handle.read()
    molecules, properties = parse_xyz(text, elements=elements, source=str(path))
    if not molecules:
        raise ValueError(f"{path}: no molecules found")
    centered = [g.with_coords(zero_com(g.coords)) for g in molecules]
    return _dataset_from_molecules(centered, properties)


def format_xyz(molecules, properties=None, comments=None) -> str:
    """Render molecules as extended-XYZ text (9-decimal coordinates)."""
    chunks = []
    for k, geom in enumerate(molecules):
        props = properties[k] if properties else {}
        comment = " ".join(f"prop:{name}={float(value)!r}" for name, value in
                           sorted(props.items()))
        if comments:
            comment = (comment + " " + comments[k]).strip()
        symbols = geom.element_symbols()
        charges = geom.charges()
        lines = [str(geom.n), comment]
        for sym, (x, y, z), q in zip(symbols, geom.coords, charges):
            lines.append(f"{sym} {x:.9f} {y:.9f} {z:.9f} {q:d}")
        chunks.append("\n".join(lines))
    return "\n".join(chunks) + "\n"


def write_xyz(path: str, molecules, properties=None, comments=None) -> None:
    with open(path, "w") as handle:
        handle.write(format_xyz(molecules, properties, comments))


# -- checkpoints ----------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise ValueError(f"checkpoint corrupt at byte {self.offset}: "
                             f"wanted {count} more bytes")
        out = self.data[self.offset:self.offset + count]
        self.offset += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ValueError(f"checkpoint corrupt at byte {self.offset}: "
                             "bad UTF-8") from None


def _write_text(out: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def save_checkpoint(params, config: RunConfig, histogram: dict[int, int],
                    stats: dict[str, tuple[float, float]], path: str,
                    extra_config: dict[str, str] | None = None) -> None:
    """Serialize parameters with their config echo, size histogram and
    property statistics.  Blocks are written in sorted-name order, so
    identical state always produces identical bytes."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    echo = config.to_text()
    if extra_config:
        echo += "".join(f"{k} = {v}\n" for k, v in sorted(extra_config.items()))
    _write_text(out, echo)
    out.write(struct.pack("<I", len(histogram)))
    for size in sorted(histogram):
        out.write(struct.pack("<IQ", size, int(histogram[size])))
    out.write(struct.pack("<I", len(stats)))
    for name in sorted(stats):
        mean, std = stats[name]
        _write_text(out, name)
        out.write(struct.pack("<dd", mean, std))
    blocks = to_blocks(params)
    out.write(struct.pack("<I", len(blocks)))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f8")
        _write_text(out, name)
        out.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            out.write(struct.pack("<Q", dim))
        out.write(arr.tobytes())
    with open(path, "wb") as handle:
        handle.write(out.getvalue())


def read_checkpoint_raw(path: str):
    """Low-level read: (config echo text, histogram, stats, named blocks)."""
    with open(path, "rb") as handle:
        reader = _Reader(handle.read())
    magic = reader.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint corrupt at byte 0: bad magic {magic!r} "
                         f"(expected {CHECKPOINT_MAGIC!r})")
    echo = reader.text()
    histogram = {}
    for _ in range(reader.u32()):
        size, count = struct.unpack("<IQ", reader.take(12))
        histogram[size] = count
    stats = {}
    for _ in range(reader.u32()):
        name = reader.text()
        stats[name] = (reader.f64(), reader.f64())
    blocks = {}
    for _ in range(reader.u32()):
        name = reader.text()
        rank = reader.u32()
        if rank > 8:
            raise ValueError(f"checkpoint corrupt at byte {reader.offset}: "
                             f"rank {rank} too large")
        dims = tuple(reader.u64() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(8 * count)
        blocks[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if reader.offset != len(reader.data):
        raise ValueError(f"checkpoint corrupt at byte {reader.offset}: "
                         f"{len(reader.data) - reader.offset} trailing bytes")
    return echo, histogram, stats, blocks


def _split_echo(echo: str) -> tuple[str, dict[str, str]]:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    config_lines, extras = [], {}
    for line in echo.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if "=" in stripped:
            key = stripped.split("=", 1)[0].strip()
            if key not in known:
                extras[key] = stripped.split("=", 1)[1].strip()
                continue
        config_lines.append(line)
    return "\n".join(config_lines), extras


def load_checkpoint(path: str):
    """Restore (model, run config, histogram, stats) from a model
    checkpoint, verifying version and shapes."""
    echo, histogram, stats, blocks = read_checkpoint_raw(path)
    config_text, extras = _split_echo(echo)
    if extras.get("kind", "model") != "model":
        raise ValueError(f"{path}: not a model checkpoint (kind={extras['kind']})")
    run_cfg = parse_config(config_text)
    template = init_model(rng_stream(0, "init"), run_cfg.net_config())
    try:
        model = from_blocks(template, blocks)
    except ValueError as exc:
        raise ValueError(f"checkpoint corrupt: {exc}") from None
    return model, run_cfg, histogram, stats


def save_regressor(reg, config: RunConfig, path: str) -> None:
    """Persist a property regressor in the common checkpoint container."""
    extra = {"kind": "regressor", "reg_property": reg.property_name,
             "reg_mean": repr(reg.target_mean), "reg_std": repr(reg.target_std)}
    save_checkpoint(reg, config, {}, {}, path, extra_config=extra)


def load_regressor(path: str):
    """Restore (regressor, run config) saved by :func:`save_regressor`."""
    from .chem_eval import RegressorParams
    from .score_net import init_dense, init_encoder

    echo, _, _, blocks = read_checkpoint_raw(path)
    config_text, extras = _split_echo(echo)
    if extras.get("kind") != "regressor":
        raise ValueError(f"{path}: not a regressor checkpoint")
    run_cfg = parse_config(config_text)
    rng = rng_stream(0, "init")
    cfg = run_cfg.net_config()
    template = RegressorParams(
        encoder=init_encoder(rng, cfg, with_time=False, with_zv=False),
        head=init_dense(rng, cfg.hidden_dim, 1),
        property_name=extras["reg_property"],
        target_mean=float(extras["reg_mean"]),
        target_std=float(extras["reg_std"]),
    )
    try:
        reg = from_blocks(template, blocks)
    except ValueError as exc:
        raise ValueError(f"checkpoint corrupt: {exc}") from None
    return reg, run_cfg


# -- synthetic templates --------------------------------------------------------

def methane_like(elements=DEFAULT_ELEMENTS) -> MolecularGeometry:
    """Five atoms: a carbon with four tetrahedral hydrogens at 1.09 A."""
    a = 1.09 / np.sqrt(3.0)
    coords = np.array([[0.0, 0.0, 0.0], [a, a, a], [a, -a, -a],
                       [-a, a, -a], [-a, -a, a]])
    return _from_symbols(["C", "H", "H", "H", "H"], coords, elements)


def water_like(elements=DEFAULT_ELEMENTS) -> MolecularGeometry:
    """O-H bonds of 0.96 A at the standard bend angle."""
    angle = np.deg2rad(104.5)
    coords = np.array([
        [0.0, 0.0, 0.0],
        [0.96, 0.0, 0.0],
        [0.96 * np.cos(angle), 0.96 * np.sin(angle), 0.0],
    ])
    return _from_symbols(["O", "H", "H"], coords, elements)


def chain_geometry(n: int, spacing: float, elements=DEFAULT_ELEMENTS,
                   symbol: str = "C") -> MolecularGeometry:
    """n atoms evenly spaced on a line; the workhorse of the conditional
    toy family (its radius of gyration scales with the spacing)."""
    coords = np.zeros((n, 3))
    coords[:, 0] = np.arange(n) * spacing
    return _from_symbols([symbol] * n, coords, elements)


def _from_symbols(symbols, coords, elements) -> MolecularGeometry:
    feats = np.zeros((len(symbols), len(elements) + 1))
    for k, sym in enumerate(symbols):
        feats[k, elements.index(sym)] = 1.0
    return MolecularGeometry(feats, zero_com(np.asarray(coords, dtype=np.float64)),
                             tuple(elements))


def jittered_copies(template: MolecularGeometry, count: int, jitter: float,
                    rng: np.random.Generator) -> list[MolecularGeometry]:
    """Training fodder: the template with small Gaussian coordinate noise."""
    out = []
    for _ in range(count):
        noise = rng.normal(0.0, jitter, size=template.coords.shape)
        out.append(template.with_coords(zero_com(template.coords + noise)))
    return out


def radius_of_gyration(geometry: MolecularGeometry) -> float:
    """Root-mean-square distance of the atoms from their centroid."""
    centered = zero_com(geometry.coords)
    return float(np.sqrt(np.mean(np.sum(centered ** 2, axis=1))))


def chain_family(count: int, rng: np.random.Generator,
                 sizes=(5, 6, 7), spacing_range=(0.8, 1.6),
                 jitter: float = 0.02, elements=DEFAULT_ELEMENTS):
    """Synthetic conditional dataset: jittered straight chains of varying
    spacing, labeled with their radius of gyration."""
    molecules, properties = [], []
    for _ in range(count):
        n = int(rng.choice(sizes))
        spacing = float(rng.uniform(*spacing_range))
        geom = chain_geometry(n, spacing, elements)
        noise = rng.normal(0.0, jitter, size=geom.coords.shape)
        geom = geom.with_coords(zero_com(geom.coords + noise))
        molecules.append(geom)
        properties.append({"rgyr": radius_of_gyration(geom)})
    return _dataset_from_molecules(molecules, properties)


def toy_dataset(count: int = 200, jitter: float = 0.04,
                seed: int = 7, elements=DEFAULT_ELEMENTS) -> Dataset:
    """The in-repo desk-scale dataset: jittered methane-like molecules."""
    rng = np.random.default_rng(seed)
    molecules = jittered_copies(methane_like(elements), count, jitter, rng)
    return _dataset_from_molecules(molecules, [{} for _ in molecules])
