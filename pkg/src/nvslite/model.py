"""The view-synthesis network: one RGBD encoder, one pose encoder, three
independent decoders (flow, mask, inpaint) reading a shared latent.

The RGBD encoder is a small inverted-residual stack; the pose encoder is a
two-layer MLP lifting the flattened 3x4 transform to a vector that is
broadcast over the spatial latent and concatenated channelwise. Each
decoder upsamples back to full resolution with (bilinear x2, conv, ELU)
blocks; mask and inpaint decoders fuse encoder skip connections, the flow
decoder by default does not. The flow head is zero-initialized and the mask
head biased strongly visible, so a fresh model is the identity mapping
under an identity pose.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .geometry import Extrinsics
from .warp import RGBDFrame

CHECKPOINT_MAGIC = b"CNVS1"
VALID_SKIP_TARGETS = frozenset({"mask", "inpaint", "flow"})
MASK_VISIBLE_BIAS = 6.0  # sigmoid(6) ~ 0.9975: fresh mask says "visible"


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    encoder_stages: int = 4
    extrinsics_hidden: int = 64
    extrinsics_out: int = 256
    skip_targets: frozenset = frozenset({"mask", "inpaint"})
    flow_scale: float = 32.0

    def __post_init__(self):
        if self.encoder_stages < 1:
            raise ValueError("encoder_stages must be >= 1")
        if self.extrinsics_out <= 0:
            raise ValueError("extrinsics_out must be positive")
        targets = frozenset(self.skip_targets)
        if not targets <= VALID_SKIP_TARGETS:
            raise ValueError(f"unknown skip targets {targets - VALID_SKIP_TARGETS}")
        object.__setattr__(self, "skip_targets", targets)

    @property
    def stride(self) -> int:
        return 2 ** self.encoder_stages

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * (2 ** i) for i in range(self.encoder_stages)]


@dataclass
class LatentF:
    """Shared latent: fused spatial features plus per-stage encoder skips.

    The deepest skip map lives at the latent's own resolution (its content
    is already inside ``features``); decoders consume the shallower ones.
    """

    features: torch.Tensor        # (B, C_enc + extrinsics_out, H/2^s, W/2^s)
    skips: list = field(default_factory=list)


def _conv_bn_relu(cin, cout, stride=1, groups=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, groups=groups, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU6(inplace=True),
    )


class InvertedResidual(nn.Module):
    """Expand -> depthwise -> linear project, with residual at stride 1."""

    def __init__(self, cin, cout, stride, expand=4):
        super().__init__()
        mid = cin * expand
        self.use_residual = stride == 1 and cin == cout
        self.layers = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU6(inplace=True),
            nn.Conv2d(mid, mid, 3, stride=stride, padding=1, groups=mid, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU6(inplace=True),
            nn.Conv2d(mid, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )

    def forward(self, x):
        out = self.layers(x)
        return x + out if self.use_residual else out


class RGBDEncoder(nn.Module):
    """Maps a 4-channel RGB+depth input to multi-scale features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.encoder_channels
        stages = [_conv_bn_relu(4, chans[0], stride=2)]
        for cin, cout in zip(chans[:-1], chans[1:]):
            stages.append(nn.Sequential(
                InvertedResidual(cin, cout, stride=2),
                InvertedResidual(cout, cout, stride=1),
            ))
        self.stages = nn.ModuleList(stages)
        self.stride = cfg.stride
        self.invocations = 0  # instrumentation for the sharing contract

    def forward(self, x):
        self.invocations += 1
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"input {h}x{w} not divisible by encoder stride {self.stride}")
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return x, skips


class ExtrinsicsEncoder(nn.Module):
    """Two-layer MLP from the 12 pose values to the pose embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(12, cfg.extrinsics_hidden)
        self.act = nn.ELU()
        self.fc2 = nn.Linear(cfg.extrinsics_hidden, cfg.extrinsics_out)

    def forward(self, pose):
        return self.fc2(self.act(self.fc1(pose)))


class Decoder(nn.Module):
    """(upsample x2, conv, ELU) stack with optional skip fusion per stage.

    Decoder convolutions use replicate padding: zero padding leaves a
    visible halo at borders and corners of the synthesized maps. Border
    position cues still reach the skip-fed decoders through the
    (zero-padded) encoder features.
    """

    def __init__(self, cfg: ModelConfig, out_channels: int, use_skips: bool):
        super().__init__()
        self.use_skips = use_skips
        enc = cfg.encoder_channels
        widths = [max(cfg.base_channels, c) for c in reversed(enc[:-1])] or []
        widths = widths + [cfg.base_channels]  # final full-resolution width
        cin = enc[-1] + cfg.extrinsics_out
        self.convs = nn.ModuleList()
        self.skip_sources = []  # encoder stage index fused after each block, or None
        for i, w in enumerate(widths):
            self.convs.append(nn.Conv2d(cin, w, 3, padding=1, padding_mode="replicate"))
            src = cfg.encoder_stages - 2 - i
            if use_skips and src >= 0:
                self.skip_sources.append(src)
                cin = w + enc[src]
            else:
                self.skip_sources.append(None)
                cin = w
        self.head = nn.Conv2d(cin, out_channels, 3, padding=1, padding_mode="replicate")
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.act = nn.ELU()

    def forward(self, latent: LatentF):
        x = latent.features
        for conv, src in zip(self.convs, self.skip_sources):
            x = self.act(conv(self.up(x)))
            if src is not None:
                x = torch.cat([x, latent.skips[src]], dim=1)
        return self.head(x)


class NVSModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        self.rgbd_encoder = RGBDEncoder(cfg)
        self.pose_encoder = ExtrinsicsEncoder(cfg)
        self.flow_decoder = Decoder(cfg, 2, use_skips="flow" in cfg.skip_targets)
        self.mask_decoder = Decoder(cfg, 1, use_skips="mask" in cfg.skip_targets)
        self.inpaint_decoder = Decoder(cfg, 3, use_skips="inpaint" in cfg.skip_targets)
        # identity-at-init: zero flow, mask saturated toward "visible"
        nn.init.zeros_(self.flow_decoder.head.weight)
        nn.init.zeros_(self.flow_decoder.head.bias)
        nn.init.zeros_(self.mask_decoder.head.weight)
        nn.init.constant_(self.mask_decoder.head.bias, MASK_VISIBLE_BIAS)

    # -- encoding ---------------------------------------------------------

    def encode_rgbd(self, x: torch.Tensor):
        """x: (B, 4, H, W) -> (features, skips)."""
        return self.rgbd_encoder(x)

    def encode_extrinsics(self, pose: torch.Tensor) -> torch.Tensor:
        """pose: (B, 12) flattened row-major [R|t]."""
        return self.pose_encoder(pose)

    def fuse_latent(self, features: torch.Tensor, embedding: torch.Tensor,
                    skips=None) -> LatentF:
        """Broadcast the pose embedding over space and concat channelwise."""
        b, _, h, w = features.shape
        tiled = embedding[:, :, None, None].expand(b, embedding.shape[1], h, w)
        return LatentF(features=torch.cat([features, tiled], dim=1),
                       skips=list(skips) if skips is not None else [])

    # -- decoding ---------------------------------------------------------

    def decode_flow(self, latent: LatentF) -> torch.Tensor:
        raw = self.flow_decoder(latent)
        return torch.tanh(raw) * self.config.flow_scale

    def decode_mask_logits(self, latent: LatentF) -> torch.Tensor:
        return self.mask_decoder(latent)

    def decode_mask(self, latent: LatentF) -> torch.Tensor:
        return torch.sigmoid(self.decode_mask_logits(latent))

    def decode_inpaint(self, latent: LatentF) -> torch.Tensor:
        return torch.sigmoid(self.inpaint_decoder(latent))

    def forward(self, rgbd: torch.Tensor, pose: torch.Tensor) -> dict:
        """One shared encoding, three independent decodes.

        Returns shift (B,2,H,W), mask and mask_logits (B,1,H,W), inpaint
        (B,3,H,W). The decoders touch nothing but the latent, so they can
        run concurrently once it is materialized.
        """
        features, skips = self.encode_rgbd(rgbd)
        embedding = self.encode_extrinsics(pose)
        latent = self.fuse_latent(features, embedding, skips)
        logits = self.decode_mask_logits(latent)
        return {
            "shift": self.decode_flow(latent),
            "mask_logits": logits,
            "mask": torch.sigmoid(logits),
            "inpaint": self.decode_inpaint(latent),
        }

    # -- convenience ------------------------------------------------------

    def skip_wiring(self) -> dict:
        """Which decoders actually consume encoder skips (introspected)."""
        return {
            "flow": self.flow_decoder.use_skips,
            "mask": self.mask_decoder.use_skips,
            "inpaint": self.inpaint_decoder.use_skips,
        }

    def predict(self, frame: RGBDFrame, T: Extrinsics) -> dict:
        """Single-frame numpy inference: shift (H,W,2), mask/mask_logits
        (H,W), inpaint (H,W,3)."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                out = self(rgbd_input(frame)[None], pose_input(T)[None])
        finally:
            self.train(was_training)
        return {
            "shift": out["shift"][0].permute(1, 2, 0).numpy(),
            "mask": out["mask"][0, 0].numpy(),
            "mask_logits": out["mask_logits"][0, 0].numpy(),
            "inpaint": out["inpaint"][0].permute(1, 2, 0).numpy(),
        }

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def rgbd_input(frame: RGBDFrame) -> torch.Tensor:
    """(4, H, W) network input: RGB plus scale-normalized log depth."""
    med = frame.median_depth()
    depth = np.log1p(frame.depth / med)
    x = np.concatenate([frame.rgb.transpose(2, 0, 1), depth[None]], axis=0)
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def pose_input(T: Extrinsics) -> torch.Tensor:
    return torch.from_numpy(T.flattened().astype(np.float32))


# -- checkpoint container --------------------------------------------------


def _config_text(cfg: ModelConfig, extra: dict | None) -> str:
    lines = [
        f"base_channels={cfg.base_channels}",
        f"encoder_stages={cfg.encoder_stages}",
        f"extrinsics_hidden={cfg.extrinsics_hidden}",
        f"extrinsics_out={cfg.extrinsics_out}",
        f"skip_targets={','.join(sorted(cfg.skip_targets))}",
        f"flow_scale={cfg.flow_scale}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k}={v}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str):
    fields, extra = {}, {}
    for line in text.strip().splitlines():
        key, _, value = line.partition("=")
        if key.startswith("meta."):
            extra[key[5:]] = value
        else:
            fields[key] = value
    targets = frozenset(t for t in fields.get("skip_targets", "").split(",") if t)
    cfg = ModelConfig(
        base_channels=int(fields["base_channels"]),
        encoder_stages=int(fields["encoder_stages"]),
        extrinsics_hidden=int(fields["extrinsics_hidden"]),
        extrinsics_out=int(fields["extrinsics_out"]),
        skip_targets=targets,
        flow_scale=float(fields["flow_scale"]),
    )
    return cfg, extra


def save_checkpoint(path, model: NVSModel, extra: dict | None = None) -> None:
    """Single binary archive: config text plus named float32 buffers.

    Integer bookkeeping buffers (batch counters) are not persisted; they do
    not affect inference.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg_bytes = _config_text(model.config, extra).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    tensors = [(name, t) for name, t in model.state_dict().items()
               if t.is_floating_point()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        nb = name.encode("utf-8")
        arr = t.detach().to(torch.float32).contiguous().numpy()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,))))
        buf.write(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (model, extra-metadata dict)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:5]!r}")
    off = 5
    (cfg_len,) = struct.unpack_from("<I", data, off)
    off += 4
    cfg, extra = _parse_config_text(data[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    loaded = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{max(ndim, 1)}I", data, off)[:ndim] if ndim else ()
        off += 4 * max(ndim, 1)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += count * 4
        loaded[name] = torch.from_numpy(arr.copy())

    model = NVSModel(cfg)
    state = model.state_dict()
    want = {n for n, t in state.items() if t.is_floating_point()}
    if want != set(loaded):
        missing = want - set(loaded)
        surplus = set(loaded) - want
        raise ValueError(f"checkpoint tensor mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(surplus)}")
    model.load_state_dict(loaded, strict=False)
    return model, extra
