"""Single-pass fusion student: dual encoders over IR and visible inputs,
per-scale gated merge heads, and a U-Net style decoder with a sigmoid output.

Four variants trade capacity for speed. They share the topology and differ
only in channel widths, depths and block style:

==================  =========================================
default             7x7 depthwise blocks with global response
                    normalization in the pointwise MLP
mobile_transformer  inverted bottlenecks early, axial
                    attention blocks at the two deep scales
mobile_cnn          inverted bottleneck convs throughout
ultralight          plain 3x3 conv blocks, narrow widths
==================  =========================================
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import fpx
from .images import FusedImage, ImagePair, pad_to_multiple

CHECKPOINT_FORMAT = "FPX1"
INPUT_MULTIPLE = 16
GATE_OFF_BIAS = -1e9


@dataclass(frozen=True)
class StudentConfig:
    variant: str
    dims: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    block: str

    def __post_init__(self):
        if len(self.dims) != 4 or len(self.depths) != 4:
            raise ValueError(
                f"student needs four scales; got dims={self.dims}, depths={self.depths}"
            )
        if any(d < 1 for d in self.dims) or any(d < 1 for d in self.depths):
            raise ValueError("dims and depths must all be >= 1")
        if self.block not in ("convnext", "mbconv", "mbconv+attn", "plain"):
            raise ValueError(f"unknown block type {self.block!r}")


VARIANTS: dict[str, StudentConfig] = {
    "default": StudentConfig("default", (32, 64, 96, 128), (2, 2, 2, 2), "convnext"),
    "mobile_transformer": StudentConfig(
        "mobile_transformer", (24, 48, 80, 112), (2, 2, 2, 2), "mbconv+attn"
    ),
    "mobile_cnn": StudentConfig("mobile_cnn", (24, 48, 64, 96), (2, 2, 2, 2), "mbconv"),
    "ultralight": StudentConfig("ultralight", (16, 24, 32, 40), (1, 1, 1, 1), "plain"),
}


class GRN(nn.Module):
    """Global response normalization over channels-last tensors (B, H, W, C)."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gx = torch.sqrt((x * x).sum(dim=(1, 2), keepdim=True))
        nx = gx / (gx.mean(dim=-1, keepdim=True) + self.eps)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, 4 * dim)
        self.grn = GRN(4 * dim)
        self.pw2 = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.dwconv(x)
        h = h.permute(0, 2, 3, 1)
        h = self.norm(h)
        h = self.pw2(self.grn(F.gelu(self.pw1(h))))
        return x + h.permute(0, 3, 1, 2)


class MBConvBlock(nn.Module):
    def __init__(self, dim: int, expand: int = 2):
        super().__init__()
        mid = expand * dim
        self.pw1 = nn.Conv2d(dim, mid, 1)
        self.dw = nn.Conv2d(mid, mid, 3, padding=1, groups=mid)
        self.pw2 = nn.Conv2d(mid, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.pw1(x))
        h = F.relu(self.dw(h))
        return x + self.pw2(h)


class _AxialAttention(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.scale = dim**-0.5

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        return self.proj(attn @ v)


class AxialAttentionBlock(nn.Module):
    """Single-head attention along rows then columns, then a pointwise MLP.
    Keeps the token count per attention call linear in the image side."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm_r = nn.LayerNorm(dim)
        self.attn_r = _AxialAttention(dim)
        self.norm_c = nn.LayerNorm(dim)
        self.attn_c = _AxialAttention(dim)
        self.norm_m = nn.LayerNorm(dim)
        self.mlp1 = nn.Linear(dim, 2 * dim)
        self.mlp2 = nn.Linear(2 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        t = x.permute(0, 2, 3, 1)
        rows = self.attn_r(self.norm_r(t).reshape(b * h, w, c)).reshape(b, h, w, c)
        t = t + rows
        cols = self.norm_c(t).permute(0, 2, 1, 3).reshape(b * w, h, c)
        t = t + self.attn_c(cols).reshape(b, w, h, c).permute(0, 2, 1, 3)
        t = t + self.mlp2(F.gelu(self.mlp1(self.norm_m(t))))
        return t.permute(0, 3, 1, 2)


class PlainBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + F.relu(self.conv(x))


def _make_blocks(config: StudentConfig, scale: int) -> nn.Sequential:
    dim = config.dims[scale]
    depth = config.depths[scale]
    if config.block == "convnext":
        cls = ConvNeXtBlock
    elif config.block == "mbconv":
        cls = MBConvBlock
    elif config.block == "mbconv+attn":
        cls = AxialAttentionBlock if scale >= 2 else MBConvBlock
    elif config.block == "plain":
        cls = PlainBlock
    else:
        raise ValueError(f"unknown block style {config.block!r}")
    return nn.Sequential(*[cls(dim) for _ in range(depth)])


class FusionHead(nn.Module):
    """Gated merge of two same-width feature maps.

    The channel gate (pooled squeeze, expand, sigmoid) modulates the
    concatenated features; a bias-free 1x1 projection folds them back to the
    branch width and the two inputs are added through untouched. With the gate
    forced to zero the output is exactly f_ir + f_vis.
    """

    def __init__(self, channels: int):
        super().__init__()
        cat = 2 * channels
        mid = max(cat // 4, 4)
        self.reduce = nn.Conv2d(cat, mid, 1)
        self.expand = nn.Conv2d(mid, cat, 1)
        self.proj = nn.Conv2d(cat, channels, 1, bias=False)

    def gate(self, f_cat: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(f_cat, 1)
        return torch.sigmoid(self.expand(F.relu(self.reduce(pooled))))

    def gated_term(self, f_ir: torch.Tensor, f_vis: torch.Tensor) -> torch.Tensor:
        """The modulated branch alone, without the additive input paths."""
        f_cat = torch.cat([f_ir, f_vis], dim=1)
        return self.proj(self.gate(f_cat) * f_cat)

    def forward(self, f_ir: torch.Tensor, f_vis: torch.Tensor) -> torch.Tensor:
        if f_ir.shape != f_vis.shape:
            raise ValueError(f"branch shapes differ: {tuple(f_ir.shape)} vs {tuple(f_vis.shape)}")
        return self.gated_term(f_ir, f_vis) + f_ir + f_vis

    def force_gate_zero(self) -> None:
        """Drive the gate's sigmoid to exact zero (structural testing hook)."""
        with torch.no_grad():
            self.expand.bias.fill_(GATE_OFF_BIAS)


class _Encoder(nn.Module):
    def __init__(self, config: StudentConfig, in_ch: int):
        super().__init__()
        dims = config.dims
        downs = [nn.Conv2d(in_ch, dims[0], 3, stride=2, padding=1)]
        for i in range(1, 4):
            downs.append(nn.Conv2d(dims[i - 1], dims[i], 3, stride=2, padding=1))
        self.downs = nn.ModuleList(downs)
        self.stages = nn.ModuleList([_make_blocks(config, i) for i in range(4)])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for down, stage in zip(self.downs, self.stages):
            x = stage(down(x))
            feats.append(x)
        return feats


class FusionStudent(nn.Module):
    """Deterministic one-shot fusion network. Inputs are (B, 1, H, W) infrared
    and (B, 3, H, W) visible tensors with H and W divisible by 16; the output
    is a (B, 3, H, W) fused image in [0, 1]."""

    def __init__(self, config: StudentConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        dims = config.dims
        self.ir_encoder = _Encoder(config, 1)
        self.vis_encoder = _Encoder(config, 3)
        self.fusion_heads = nn.ModuleList([FusionHead(c) for c in dims])
        self.dec2 = nn.Conv2d(dims[3] + dims[2], dims[2], 3, padding=1)
        self.dec1 = nn.Conv2d(dims[2] + dims[1], dims[1], 3, padding=1)
        self.dec0 = nn.Conv2d(dims[1] + dims[0], dims[0], 3, padding=1)
        self.out1 = nn.Conv2d(dims[0], dims[0], 3, padding=1)
        self.out2 = nn.Conv2d(dims[0], 3, 3, padding=1)
        self._reset_parameters(seed)

    def _reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight.shape[1:].numel()
                with torch.no_grad():
                    module.weight.copy_(
                        torch.randn(module.weight.shape, generator=gen) / max(fan_in, 1) ** 0.5
                    )
                    if module.bias is not None:
                        module.bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                with torch.no_grad():
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            # GRN parameters stay at zero so the blocks start near identity.

    @staticmethod
    def _up(x: torch.Tensor) -> torch.Tensor:
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, ir: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
        if ir.ndim != 4 or vis.ndim != 4 or ir.shape[1] != 1 or vis.shape[1] != 3:
            raise ValueError(
                f"expected ir (B, 1, H, W) and vis (B, 3, H, W), got {tuple(ir.shape)} and {tuple(vis.shape)}"
            )
        if ir.shape[2:] != vis.shape[2:]:
            raise ValueError(f"spatial sizes differ: {tuple(ir.shape[2:])} vs {tuple(vis.shape[2:])}")
        h, w = ir.shape[2], ir.shape[3]
        if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
            raise ValueError(f"input size {h}x{w} must be divisible by {INPUT_MULTIPLE}")
        f_ir = self.ir_encoder(ir)
        f_vis = self.vis_encoder(vis)
        merged = [head(a, b) for head, a, b in zip(self.fusion_heads, f_ir, f_vis)]
        d = merged[3]
        d = F.gelu(self.dec2(torch.cat([self._up(d), merged[2]], dim=1)))
        d = F.gelu(self.dec1(torch.cat([self._up(d), merged[1]], dim=1)))
        d = F.gelu(self.dec0(torch.cat([self._up(d), merged[0]], dim=1)))
        d = F.gelu(self.out1(self._up(d)))
        return torch.sigmoid(self.out2(d))

    def fuse_arrays(self, ir: np.ndarray, vis: np.ndarray) -> np.ndarray:
        """Fuse one numpy pair (ir (H, W), vis (H, W, 3), both in [0, 1]);
        pads to the required multiple and crops the result back."""
        if ir.shape != vis.shape[:2]:
            raise ValueError(f"ir {ir.shape} and vis {vis.shape} disagree on size")
        h, w = ir.shape
        ir_p, _ = pad_to_multiple(ir.astype(np.float32), INPUT_MULTIPLE)
        vis_p, _ = pad_to_multiple(vis.astype(np.float32), INPUT_MULTIPLE)
        dtype = next(self.parameters()).dtype
        ir_t = torch.from_numpy(ir_p).to(dtype)[None, None]
        vis_t = torch.from_numpy(vis_p).to(dtype).permute(2, 0, 1)[None]
        with torch.no_grad():
            out = self(ir_t, vis_t)
        fused = out[0].permute(1, 2, 0).to(torch.float32).numpy()
        return np.clip(fused[:h, :w], 0.0, 1.0)


def build_student(variant: str = "default", seed: int = 0) -> FusionStudent:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; available: {sorted(VARIANTS)}")
    return FusionStudent(VARIANTS[variant], seed=seed)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def fuse_pair(model: FusionStudent, pair: ImagePair) -> FusedImage:
    fused = model.fuse_arrays(pair.ir, pair.vis)
    return FusedImage(pixels=fused, source_id=pair.id)


def save_checkpoint(model: FusionStudent, path: str | Path, extra: dict | None = None) -> None:
    """Write the model as a zip of tensor blobs plus a JSON descriptor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    descriptor = {
        "format": CHECKPOINT_FORMAT,
        "kind": "student",
        "variant": model.config.variant,
        "seed": model.seed,
        "tensors": {},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, (key, tensor) in enumerate(state.items()):
            fname = f"tensors/{i:04d}.fpx"
            descriptor["tensors"][key] = {"file": fname, "shape": list(tensor.shape)}
            zf.writestr(fname, fpx.encode_tensor(tensor.detach().to(torch.float32).numpy()))
        zf.writestr("descriptor.json", json.dumps(descriptor, indent=2))


def _read_descriptor(zf: zipfile.ZipFile, path: Path) -> dict:
    try:
        raw = zf.read("descriptor.json")
    except KeyError:
        raise ValueError(f"{path} is not a student checkpoint (no descriptor)") from None
    descriptor = json.loads(raw)
    if descriptor.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(
            f"checkpoint version mismatch: file says {descriptor.get('format')!r}, "
            f"reader supports {CHECKPOINT_FORMAT!r}"
        )
    return descriptor


def load_checkpoint(path: str | Path) -> tuple[FusionStudent, dict]:
    """Rebuild the model a checkpoint describes and load its tensors.

    Raises on version mismatch, missing or unexpected tensors, and shape
    disagreements between file and model.
    """
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        descriptor = _read_descriptor(zf, path)
        model = build_student(descriptor["variant"], seed=int(descriptor.get("seed", 0)))
        state = model.state_dict()
        file_keys = set(descriptor["tensors"])
        model_keys = set(state)
        if file_keys != model_keys:
            missing = sorted(model_keys - file_keys)
            unexpected = sorted(file_keys - model_keys)
            raise ValueError(
                f"checkpoint tensors do not match model: missing {missing}, unexpected {unexpected}"
            )
        for key, entry in descriptor["tensors"].items():
            arr = fpx.decode_tensor(zf.read(entry["file"]))
            if tuple(arr.shape) != tuple(state[key].shape):
                raise ValueError(
                    f"checkpoint tensor {key!r}: file has shape {tuple(arr.shape)}, "
                    f"model expects {tuple(state[key].shape)}"
                )
            with torch.no_grad():
                state[key].copy_(torch.from_numpy(arr))
    return model, descriptor.get("extra", {})


def checkpoint_extra(path: str | Path) -> dict:
    """Read only the descriptor's extra payload (config echo, train progress)."""
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        return _read_descriptor(zf, path).get("extra", {})
