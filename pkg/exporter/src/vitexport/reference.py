"""Reference PyTorch ViT whose blocks match the canonical tensor schema.

Pre-LN blocks with fused QKV, erf GELU, LayerNorm eps 1e-6, mean-pooled
classifier head. Weight layout follows the timm convention (Linear stores
[out, in]); the export step transposes into the consumer's [in, out] layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class ReferenceConfig:
    depth: int
    dim: int
    heads: int
    mlp_ratio: float
    img_size: int
    patch_size: int
    classes: int = 4
    use_cls_token: bool = True

    @property
    def grid_tokens(self) -> int:
        return (self.img_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.grid_tokens + (1 if self.use_cls_token else 0)


MODEL_REGISTRY = {
    # desk-scale twin of the consumer's toy: 2 blocks, D=64, H=4, N=16
    "toy-vit": ReferenceConfig(depth=2, dim=64, heads=4, mlp_ratio=2.0,
                               img_size=16, patch_size=4, use_cls_token=False),
    # vit-tiny geometry (196 patches + cls token), randomly initialized
    "vit-tiny-sized": ReferenceConfig(depth=12, dim=192, heads=3, mlp_ratio=4.0,
                                      img_size=224, patch_size=16, classes=10),
}


class UnsupportedModelError(ValueError):
    pass


class ReferenceBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        hidden = int(round(dim * mlp_ratio))
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()  # exact erf form

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        scores = q @ k.transpose(-2, -1) / self.head_dim ** 0.5
        probs = scores.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        x = x + self.fc2(self.act(self.fc1(self.norm2(x))))
        return x


class ReferenceViT(nn.Module):
    def __init__(self, config: ReferenceConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv2d(3, config.dim, kernel_size=config.patch_size,
                                     stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.tokens, config.dim))
        if config.use_cls_token:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, config.dim))
        self.blocks = nn.ModuleList(
            ReferenceBlock(config.dim, config.heads, config.mlp_ratio)
            for _ in range(config.depth))
        self.head = nn.Linear(config.dim, config.classes)

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(images)  # (B, D, H', W')
        x = x.flatten(2).transpose(1, 2)  # (B, N_grid, D)
        if self.config.use_cls_token:
            cls = self.cls_token.expand(x.shape[0], -1, -1)
            x = torch.cat([cls, x], dim=1)
        return x + self.pos_embed

    @torch.no_grad()
    def block_outputs(self, tokens: torch.Tensor) -> list:
        outs = []
        x = tokens
        for blk in self.blocks:
            x = blk(x)
            outs.append(x)
        return outs

    @torch.no_grad()
    def classify_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens
        for blk in self.blocks:
            x = blk(x)
        return self.head(x.mean(dim=1))


def build_reference_model(model_id: str, seed: int = 0) -> ReferenceViT:
    if model_id not in MODEL_REGISTRY:
        raise UnsupportedModelError(
            f"unsupported model {model_id!r}; known: {sorted(MODEL_REGISTRY)}")
    torch.manual_seed(seed)
    model = ReferenceViT(MODEL_REGISTRY[model_id])
    # non-degenerate random init for every parameter, pretrained-free sandbox
    for p in model.parameters():
        if p.dim() > 1:
            nn.init.normal_(p, std=0.3 / max(p.shape[-1], 1) ** 0.5)
        else:
            nn.init.normal_(p, std=0.1)
    for blk in model.blocks:
        nn.init.ones_(blk.norm1.weight)
        nn.init.ones_(blk.norm2.weight)
        nn.init.zeros_(blk.norm1.bias)
        nn.init.zeros_(blk.norm2.bias)
    model.eval()
    return model
