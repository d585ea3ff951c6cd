"""Model assembly: the attentive classifier, the two-head variational encoder,
and encoder-weight transfer between them.

Both models share an identically named trunk (stem, inception stages,
attention links), which is what makes checkpoint transfer a plain
name-and-shape match.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    BatchNorm,
    Conv,
    ConvBnRelu,
    Dense,
    InceptionBlockConfig,
    ParamStore,
    PartialAttention,
    ResidualInception,
)
from .tensor import Graph, Tensor

TRUNK_PREFIXES = ("stem.", "stage")


@dataclass
class StageConfig:
    num_blocks: int
    out_channels: int
    factorized: bool = False
    downsample: bool = False


@dataclass
class ModelConfig:
    """Declarative description of a classifier or two-head VAE."""

    input_size: tuple[int, int, int]            # (C, H, W)
    stages: list[StageConfig]
    attention_links: list[tuple[list[int], int]] = field(default_factory=list)
    num_classes: int = 4
    latent_dim: int = 32
    dropout_rate: float = 0.2
    head: str = "classifier"

    def validate(self):
        c, h, w = self.input_size
        if c < 1 or h < 4 or w < 4:
            raise ValueError(f"input_size must be (C>=1, H>=4, W>=4), got {self.input_size}")
        if not self.stages:
            raise ValueError("at least one stage is required")
        for s in self.stages:
            if s.num_blocks < 1 or s.out_channels < 4:
                raise ValueError(f"invalid stage {s}: need num_blocks >= 1, out_channels >= 4")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.head not in ("classifier", "vae_twohead"):
            raise ValueError(f"head must be classifier or vae_twohead, got {self.head!r}")
        seen_targets = set()
        n = len(self.stages)
        for sources, target in self.attention_links:
            if not sources:
                raise ValueError("attention link needs at least one source stage")
            if not (0 <= target < n):
                raise ValueError(f"attention target stage {target} out of range")
            if target in seen_targets:
                raise ValueError(f"multiple attention links target stage {target}")
            seen_targets.add(target)
            for s in sources:
                if not (0 <= s < target):
                    raise ValueError(
                        f"attention source stage {s} must precede target {target}"
                    )
        # per-stage resolutions; raises on non-integer stride ratios
        res = self.stage_resolutions()
        from .blocks import compute_stride
        for sources, target in self.attention_links:
            for s in sources:
                compute_stride(res[s], res[target])

    def stage_resolutions(self) -> list[tuple[int, int]]:
        """Spatial resolution of each stage's output (stem halves the input)."""
        _, h, w = self.input_size
        h, w = -(-h // 2), -(-w // 2)
        out = []
        for s in self.stages:
            if s.downsample:
                h, w = -(-h // 2), -(-w // 2)
            out.append((h, w))
        return out

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "stages": [
                {"num_blocks": s.num_blocks, "out_channels": s.out_channels,
                 "factorized": s.factorized, "downsample": s.downsample}
                for s in self.stages
            ],
            "attention_links": [[list(src), tgt] for src, tgt in self.attention_links],
            "num_classes": self.num_classes,
            "latent_dim": self.latent_dim,
            "dropout_rate": self.dropout_rate,
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_size=tuple(d["input_size"]),
            stages=[StageConfig(**s) for s in d["stages"]],
            attention_links=[(list(src), int(tgt)) for src, tgt in d.get("attention_links", [])],
            num_classes=int(d.get("num_classes", 4)),
            latent_dim=int(d.get("latent_dim", 32)),
            dropout_rate=float(d.get("dropout_rate", 0.2)),
            head=d.get("head", "classifier"),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _block_cfg(in_ch: int, out_ch: int, factorized: bool) -> InceptionBlockConfig:
    w = max(out_ch // 4, 1)
    return InceptionBlockConfig(
        in_channels=in_ch, b1x1=w, b3x3_reduce=w, b3x3=w,
        b5x5_reduce=w, b5x5=w, bpool=w, out_channels=out_ch,
        factorized=factorized,
    )


class _Trunk:
    """Stem + inception stages + attention links; shared by both models."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        c_in, _, _ = cfg.input_size
        res = cfg.stage_resolutions()
        self.stem = ConvBnRelu(store, "stem", c_in, cfg.stages[0].out_channels,
                               3, 3, stride=2)
        self.stages = []
        prev = cfg.stages[0].out_channels
        for i, s in enumerate(cfg.stages):
            down = None
            if s.downsample:
                down = ConvBnRelu(store, f"stage{i}.down", prev, s.out_channels,
                                  3, 3, stride=2)
                prev = s.out_channels
            blocks = []
            for j in range(s.num_blocks):
                blocks.append(ResidualInception(
                    store, f"stage{i}.block{j}",
                    _block_cfg(prev, s.out_channels, s.factorized)))
                prev = s.out_channels
            self.stages.append((down, blocks))
        self.attention: dict[int, tuple[list[int], PartialAttention]] = {}
        widths = [s.out_channels for s in cfg.stages]
        for sources, target in cfg.attention_links:
            layer = PartialAttention(
                store, f"stage{target}.attn",
                [widths[s] for s in sources], [res[s] for s in sources],
                widths[target], res[target],
            )
            self.attention[target] = (list(sources), layer)
        self.out_channels = prev

    def forward(self, g: Graph, x: Tensor, mode: str) -> Tensor:
        """Run to the globally pooled feature vector (N, C)."""
        h = self.stem.forward(g, x, mode)
        stage_outputs: list[Tensor] = []
        for i, (down, blocks) in enumerate(self.stages):
            if down is not None:
                h = down.forward(g, h, mode)
            for b in blocks:
                h = b.forward(g, h, mode)
            link = self.attention.get(i)
            if link is not None:
                sources, layer = link
                h = layer.forward(g, [stage_outputs[s] for s in sources], h, mode)
            stage_outputs.append(h)
        return T.reduce(h, "mean", axes=(2, 3))


class ClassifierModel:
    """Attentive residual-inception classifier."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore(seed)
        self.trunk = _Trunk(self.store, cfg)
        self.head = Dense(self.store, "head.fc", self.trunk.out_channels, cfg.num_classes)

    def forward(self, g: Graph, x: Tensor, mode: str,
                rng: np.random.Generator | None = None,
                parts: dict | None = None) -> Tensor:
        pooled = self.trunk.forward(g, x, mode)
        if parts is not None:
            parts["features"] = pooled
        h = T.dropout(pooled, self.cfg.dropout_rate, mode, rng)
        return self.head.forward(g, h)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Softmax probabilities for a batch, inference mode."""
        g = Graph("f32")
        logits = self.forward(g, g.constant(x), "infer")
        return T.softmax(logits).numpy()

    def features(self, x: np.ndarray) -> np.ndarray:
        """Penultimate pooled features for a batch, inference mode."""
        g = Graph("f32")
        parts: dict = {}
        self.forward(g, g.constant(x), "infer", parts=parts)
        return parts["features"].numpy()

    def named_tensors(self) -> dict[str, np.ndarray]:
        return self.store.named_tensors()

    def encoder_names(self) -> list[str]:
        return [n for n in self.named_tensors() if n.startswith(TRUNK_PREFIXES)]


class _Decoder:
    """Mirror of the trunk: dense seed, nearest-neighbor upsampling, conv."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, trunk_channels: int):
        c_in, h, w = cfg.input_size
        n_down = 1 + sum(1 for s in cfg.stages if s.downsample)
        if h % (1 << n_down) or w % (1 << n_down):
            raise ValueError(
                f"vae_twohead needs input dims divisible by {1 << n_down}, "
                f"got {h}x{w}"
            )
        self.seed_hw = (h >> n_down, w >> n_down)
        self.seed_channels = trunk_channels
        level_widths = [cfg.stages[0].out_channels] + [
            s.out_channels for s in cfg.stages if s.downsample
        ]
        targets = list(reversed(level_widths[:-1])) + [level_widths[0]]
        self.fc = Dense(store, "decoder.fc",
                        cfg.latent_dim,
                        trunk_channels * self.seed_hw[0] * self.seed_hw[1])
        self.ups = []
        prev = trunk_channels
        for k, width in enumerate(targets):
            self.ups.append(ConvBnRelu(store, f"decoder.up{k}", prev, width, 3, 3))
            prev = width
        self.out = Conv(store, "decoder.out", prev, c_in, 1, 1)

    def forward(self, g: Graph, z: Tensor, mode: str) -> Tensor:
        n = z.shape[0]
        h = self.fc.forward(g, z)
        h = T.reshape(h, (n, self.seed_channels) + self.seed_hw)
        for up in self.ups:
            h = up.forward(g, T.upsample2x(h), mode)
        return self.out.forward(g, h)


class TwoHeadVAE:
    """Variational encoder with a reconstruction head and a classification head.

    The classification head reads the pooled pre-latent feature, so inference
    stays deterministic and the trunk remains transfer-compatible with the
    classifier.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        if cfg.head != "vae_twohead":
            raise ValueError(f"config head is {cfg.head!r}, expected 'vae_twohead'")
        self.cfg = cfg
        self.store = ParamStore(seed)
        self.trunk = _Trunk(self.store, cfg)
        c = self.trunk.out_channels
        self.mu_head = Dense(self.store, "vae.mu", c, cfg.latent_dim)
        self.logvar_head = Dense(self.store, "vae.logvar", c, cfg.latent_dim)
        self.cls_head = Dense(self.store, "vae.cls", c, cfg.num_classes)
        self.decoder = _Decoder(self.store, cfg, c)

    def forward(self, g: Graph, x: Tensor, mode: str,
                rng: np.random.Generator | None = None,
                parts: dict | None = None):
        pooled = self.trunk.forward(g, x, mode)
        if parts is not None:
            parts["features"] = pooled
        mu = self.mu_head.forward(g, pooled)
        logvar = self.logvar_head.forward(g, pooled)
        z = reparameterize(mu, logvar, rng) if mode == "train" else mu
        recon = self.decoder.forward(g, z, mode)
        logits = self.cls_head.forward(g, pooled)
        return recon, mu, logvar, logits

    def named_tensors(self) -> dict[str, np.ndarray]:
        return self.store.named_tensors()

    def encoder_names(self) -> list[str]:
        return [n for n in self.named_tensors() if n.startswith(TRUNK_PREFIXES)]


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    """Sample z = mu + exp(logvar / 2) * eps with eps ~ N(0, 1)."""
    if mu.shape != logvar.shape:
        raise ValueError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
    if rng is None:
        raise ValueError("reparameterize requires an rng")
    eps = mu.graph.constant(rng.standard_normal(mu.shape))
    return T.add(mu, T.mul(T.exp(T.scale(logvar, 0.5)), eps))


def build_classifier(cfg: ModelConfig, seed: int = 0) -> ClassifierModel:
    return ClassifierModel(cfg, seed)


def build_vae_twohead(cfg: ModelConfig, seed: int = 0) -> TwoHeadVAE:
    return TwoHeadVAE(cfg, seed)


def count_parameters(model) -> int:
    """Total element count over trainable parameters."""
    return model.store.trainable_count()


class TransferError(Exception):
    """No checkpoint tensor matched the target model."""


def transfer_encoder(source, target_model) -> dict:
    """Overwrite every target tensor whose name and shape match the checkpoint.

    ``source`` is a Checkpoint or any mapping of name -> array.  Returns a
    report with the match count and the names skipped on either side; raises
    TransferError when nothing matches.
    """
    tensors = getattr(source, "tensors", source)
    matched = 0
    skipped = []
    target = target_model.named_tensors()
    for name, arr in target.items():
        src = tensors.get(name)
        if src is None:
            skipped.append(f"{name}: not in checkpoint")
        elif src.shape != arr.shape:
            skipped.append(f"{name}: shape {src.shape} != {arr.shape}")
        else:
            arr[:] = src
            matched += 1
    for name in tensors:
        if name not in target:
            skipped.append(f"{name}: not in target model")
    if matched == 0:
        raise TransferError("no checkpoint tensor matched the target model")
    return {"matched": matched, "skipped": sorted(skipped)}
