"""Network assembly: configuration, parameter construction, the
encoder/decoder feature extractor, the full per-block forward pass, and
checkpoint serialization.

Geometry (neighbor lists, sampling, grouping, interpolation plans) depends
only on coordinates, so it is computed once per block into a ForwardPlan
and reused across epochs and finite-difference probes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import attention, enrichment, gpm
from . import tensor as T
from .errors import ContractViolation, DimensionMismatch
from .spatial import ball_group, farthest_point_sample, interpolation_plan, knn
from .tensor import DTYPES, Tensor

CHECKPOINT_MAGIC = b"ELGS"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    num_classes: int = 13
    feature_width: int = 3               # per-point input width (xyz [+ rgb])
    k_neighbors: int = 3
    enrich_radius: float = 0.06
    enrich_mode: str = "gated"           # gated | concat | off
    layer_scales: tuple = (1024, 256, 64, 16)
    layer_radii: tuple = (0.1, 0.2, 0.4, 0.8)
    group_sizes: tuple = (32, 32, 32, 32)
    channel_widths: tuple = (64, 128, 256, 512)
    decoder_widths: tuple = (256, 256, 128, 128)
    gpm_enabled: tuple = (True, True, False, False)
    gpm_stack_depth: int = 2
    use_attention: bool = True
    block_points: int = 4096
    cube_size: float = 1.0
    partition_mode: str = "xy"
    precision: str = "float64"

    def __post_init__(self):
        for name in ("layer_scales", "layer_radii", "group_sizes",
                     "channel_widths", "decoder_widths", "gpm_enabled"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        L = len(self.layer_scales)
        for name in ("layer_radii", "group_sizes", "channel_widths",
                     "decoder_widths", "gpm_enabled"):
            if len(getattr(self, name)) != L:
                raise ContractViolation(
                    f"{name} has {len(getattr(self, name))} entries for {L} layers")
        if any(b >= a for a, b in zip(self.layer_scales, self.layer_scales[1:])):
            raise ContractViolation(
                f"layer_scales must strictly decrease, got {self.layer_scales}")
        if self.layer_scales[0] > self.block_points:
            raise ContractViolation(
                f"first scale {self.layer_scales[0]} exceeds block size {self.block_points}")
        if self.num_classes < 2:
            raise ContractViolation(f"need at least 2 classes, got {self.num_classes}")
        if self.enrich_mode not in ("gated", "concat", "off"):
            raise ContractViolation(f"unknown enrich_mode {self.enrich_mode!r}")
        if self.precision not in DTYPES:
            raise ContractViolation(f"precision must be one of {sorted(DTYPES)}")
        if self.block_points > attention.MAX_POINTS:
            raise ContractViolation(
                f"block_points {self.block_points} exceeds the attention cap "
                f"{attention.MAX_POINTS}")
        for l, (w, enabled) in enumerate(zip(self.channel_widths, self.gpm_enabled)):
            if enabled and w % 2:
                raise ContractViolation(
                    f"layer {l} width {w} must be even when its group module "
                    "concatenates two half-width branches")

    @property
    def num_layers(self) -> int:
        return len(self.layer_scales)

    @property
    def c_d(self) -> int:
        return self.decoder_widths[-1]

    @property
    def enriched_width(self) -> int:
        return enrichment.output_width(self.feature_width, self.k_neighbors,
                                       self.enrich_mode)

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def level_widths(self) -> list:
        return [self.enriched_width] + list(self.channel_widths)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown network config keys: {sorted(unknown)}")
        return cls(**data)


def apply_ablations(config: NetworkConfig, disable_cr=False, concat_cr=False,
                    disable_gpm=False, disable_attention=False) -> NetworkConfig:
    """Effective architecture for an ablation variant."""
    if disable_cr and concat_cr:
        raise ContractViolation("disable_cr and concat_cr are mutually exclusive")
    out = config
    if disable_cr:
        out = replace(out, enrich_mode="off")
    elif concat_cr:
        out = replace(out, enrich_mode="concat")
    if disable_gpm:
        out = replace(out, gpm_enabled=tuple(False for _ in config.gpm_enabled))
    if disable_attention:
        out = replace(out, use_attention=False)
    return out


# ---------------------------------------------------------------------------
# parameters


def init_model_params(config: NetworkConfig, seed: int = 0) -> dict:
    """Glorot-uniform weights / zero biases for every module the configured
    forward pass reaches, as name -> Tensor(requires_grad=True)."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    if config.enrich_mode == "gated":
        arrays.update(enrichment.init_params(rng, config.feature_width,
                                             config.k_neighbors))
    width = config.enriched_width
    for l in range(config.num_layers):
        grouped_in = width + 3  # members carry centroid-relative coordinates
        if config.gpm_enabled[l]:
            arrays.update(gpm.init_params(rng, grouped_in, config.channel_widths[l] // 2,
                                          config.gpm_stack_depth, prefix=f"enc{l}.gpm"))
        else:
            arrays.update(gpm.init_plain_params(rng, grouped_in, config.channel_widths[l],
                                                prefix=f"enc{l}.mlp"))
        width = config.channel_widths[l]

    lw = config.level_widths()
    cur = lw[-1]
    for s in range(config.num_layers):
        lateral = lw[config.num_layers - s - 1]
        fan_in = cur + lateral
        fan_out = config.decoder_widths[s]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"dec{s}.w"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        arrays[f"dec{s}.b"] = np.zeros(fan_out)
        cur = fan_out

    head = attention.init_params(rng, config.c_d, config.num_classes)
    if not config.use_attention:
        head = {name: a for name, a in head.items() if name.startswith("head.cls")}
    arrays.update(head)

    dtype = config.dtype
    return {name: Tensor(a.astype(dtype), requires_grad=True, name=name)
            for name, a in arrays.items()}


# ---------------------------------------------------------------------------
# geometry plan


@dataclass
class ForwardPlan:
    enrich_idx: np.ndarray | None
    level_xyz: list
    members: list                        # per layer: (scale, group_size) indices
    rel_coords: list                     # per layer: (scale, group_size, 3)
    interp: list = field(default_factory=list)  # per decode stage: (idx, weights)


def build_plan(config: NetworkConfig, xyz: np.ndarray) -> ForwardPlan:
    """All geometry for one block, computed from coordinates alone."""
    xyz = np.asarray(xyz, dtype=np.float64)
    n = xyz.shape[0]
    if config.layer_scales[0] > n:
        raise ContractViolation(
            f"first scale {config.layer_scales[0]} exceeds {n} block points")
    enrich_idx = None
    if config.enrich_mode != "off":
        enrich_idx = knn(xyz, xyz, config.k_neighbors, config.enrich_radius).indices

    level_xyz = [xyz]
    members, rel_coords = [], []
    for l in range(config.num_layers):
        cur = level_xyz[-1]
        cents = farthest_point_sample(cur, config.layer_scales[l])
        grouping = ball_group(cur, cents, config.layer_radii[l], config.group_sizes[l])
        centers = cur[cents]
        members.append(grouping.members)
        rel_coords.append(cur[grouping.members] - centers[:, None, :])
        level_xyz.append(centers)

    interp = []
    for s in range(config.num_layers):
        coarse = level_xyz[config.num_layers - s]
        fine = level_xyz[config.num_layers - s - 1]
        interp.append(interpolation_plan(coarse, fine))
    return ForwardPlan(enrich_idx, level_xyz, members, rel_coords, interp)


# ---------------------------------------------------------------------------
# forward


def enrich(params: dict, config: NetworkConfig, plan: ForwardPlan,
           feats: Tensor) -> Tensor:
    if config.enrich_mode == "off":
        return feats
    context = enrichment.contextual_representation(feats, plan.enrich_idx)
    if config.enrich_mode == "gated":
        return enrichment.gated_fuse(params, feats, context)
    return enrichment.concat_fuse(feats, context)


def encode(params: dict, config: NetworkConfig, plan: ForwardPlan,
           feats: Tensor) -> list:
    """Per-level features, index 0 = input resolution."""
    levels = [feats]
    for l in range(config.num_layers):
        cur = levels[-1]
        mem = plan.members[l]
        s, g = mem.shape
        gathered = T.reshape(T.gather_rows(cur, mem.ravel()),
                             (s, g, cur.data.shape[1]))
        rel = Tensor(plan.rel_coords[l].astype(config.dtype))
        grouped = T.concat_cols([gathered, rel])
        if config.gpm_enabled[l]:
            pooled = gpm.gpm_forward(params, grouped, config.gpm_stack_depth,
                                     prefix=f"enc{l}.gpm")
        else:
            pooled = gpm.plain_forward(params, grouped, prefix=f"enc{l}.mlp")
        levels.append(pooled)
    return levels


def decode(params: dict, config: NetworkConfig, plan: ForwardPlan,
           levels: list) -> Tensor:
    """Coarse-to-fine upsampling with lateral concatenation, to width C_d."""
    if len(levels) != config.num_layers + 1:
        raise ContractViolation(
            f"decoder expects {config.num_layers + 1} encoder levels, got {len(levels)}")
    cur = levels[-1]
    for s in range(config.num_layers):
        idx, w = plan.interp[s]
        up = T.weighted_gather_rows(cur, idx, w)
        lateral = levels[config.num_layers - s - 1]
        cat = T.concat_cols([up, lateral])
        cur = T.relu(T.fc(cat, params[f"dec{s}.w"], params[f"dec{s}.b"]))
    return cur


def forward(params: dict, config: NetworkConfig, plan: ForwardPlan,
            features: np.ndarray) -> Tensor:
    """Block features (n, feature_width) -> per-point logits (n, num_classes)."""
    if features.shape[1] != config.feature_width:
        raise DimensionMismatch(
            f"expected {config.feature_width} feature columns, got {features.shape[1]}")
    x = Tensor(np.asarray(features, dtype=config.dtype))
    enriched = enrich(params, config, plan, x)
    levels = encode(params, config, plan, enriched)
    point_feats = decode(params, config, plan, levels)
    if config.use_attention:
        f_spatial = attention.spatial_attention(params, point_feats)
        f_channel = attention.channel_attention(point_feats)
        return attention.classify(params, f_spatial, f_channel)
    return T.fc_rowstable(point_feats, params["head.cls.w"], params["head.cls.b"])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: dict, path):
    """Parameters as f32 records, sorted by name for a canonical byte layout."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path, dtype=np.float64) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<HI")
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    if off != len(raw):
        raise ContractViolation(f"{path}: {len(raw) - off} trailing bytes")
    return params


def quantize_params(params: dict) -> dict:
    """Pass parameters through f32 so in-memory values match what a
    checkpoint stores; keeps post-save predictions bit-identical."""
    return {name: Tensor(p.data.astype("<f4").astype(p.data.dtype),
                         requires_grad=True, name=name)
            for name, p in params.items()}
