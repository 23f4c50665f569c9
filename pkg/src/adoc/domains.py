"""Ownership and routing of shared versus per-domain parameters.

Every parameter belongs either to the shared bank (convolutions, attention,
feed-forward, input projection) or to exactly one domain's bank
(normalization layers, residual and bottleneck adapters, classifier head).
A forward pass for domain ``d`` reads only the shared bank and domain
``d``'s bank; training in adapter mode updates only domain ``d``'s bank, so
every other domain's behavior is untouched down to the last bit.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import seqnet as sq
from .backbone import BackboneConfig, RoutingError
from .tensor import AccessLog, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; everything else derives from these."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    d_model: int = 128
    d_ff: int = 128
    num_layers: int = 2
    num_heads: int = 8
    bottleneck_dim: int = 16
    alphabet_size: int = 36

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.bottleneck_dim >= self.d_model:
            raise ValueError("bottleneck dim must be smaller than d_model")

    @property
    def num_classes(self) -> int:
        return self.alphabet_size + 1  # includes the blank

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("d_model", "d_ff", "num_layers", "num_heads", "bottleneck_dim", "alphabet_size")}
        d["backbone"] = {
            "num_modules": self.backbone.num_modules,
            "blocks_per_module": self.backbone.blocks_per_module,
            "channel_widths": list(self.backbone.channel_widths),
            "vertical_strides": list(self.backbone.vertical_strides),
            "horizontal_strides": list(self.backbone.horizontal_strides),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        b = d["backbone"]
        return cls(
            backbone=BackboneConfig(
                num_modules=b["num_modules"],
                blocks_per_module=b["blocks_per_module"],
                channel_widths=tuple(b["channel_widths"]),
                vertical_strides=tuple(b["vertical_strides"]),
                horizontal_strides=tuple(b["horizontal_strides"]),
            ),
            **{k: d[k] for k in
               ("d_model", "d_ff", "num_layers", "num_heads", "bottleneck_dim", "alphabet_size")},
        )


def tiny_config(alphabet_size: int = 5) -> ModelConfig:
    """Small test-sized model: same shape contracts, far fewer weights."""
    return ModelConfig(
        backbone=BackboneConfig(
            num_modules=2,
            blocks_per_module=1,
            channel_widths=(4, 8),
            vertical_strides=(2, 2),
            horizontal_strides=(2, 2),
        ),
        d_model=16,
        d_ff=16,
        num_layers=1,
        num_heads=2,
        bottleneck_dim=4,
        alphabet_size=alphabet_size,
    )


@dataclass(frozen=True)
class TrainMode:
    """backbone, adapter(domain), or finetune(domain)."""

    kind: str
    domain: int | None = None

    def __post_init__(self):
        if self.kind not in ("backbone", "adapter", "finetune"):
            raise ValueError(f"unknown training mode {self.kind!r}")
        if self.kind == "backbone" and self.domain not in (None, 0):
            raise ValueError("backbone mode always trains against domain 0")
        if self.kind != "backbone" and self.domain is None:
            raise ValueError(f"{self.kind} mode needs a domain id")

    def describe(self) -> str:
        return self.kind if self.kind == "backbone" else f"{self.kind}(domain {self.domain})"


class DomainRegistry:
    """The full model: shared parameters plus one bank per registered domain."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.init_rng = np.random.default_rng(seed)
        self.backbone = bb.init_backbone(config.backbone, self.init_rng)
        self.seqnet = sq.init_seqnet(
            config.backbone.feature_channels, config.d_model, config.d_ff,
            config.num_layers, config.num_heads, self.init_rng,
        )
        self.domain_names: dict[int, str] = {}
        self.next_id = 0

    # -- registration -------------------------------------------------------

    def register_domain(self, init: str = "zero-identity", name: str | None = None,
                        source: int = 0) -> int:
        """Allocate a fresh parameter bank and return its domain id.

        ``zero-identity`` copies normalization and classifier values from the
        source domain (defaults for the very first domain, which has no
        source) and zeroes every adapter's residual path, so the new domain
        initially computes exactly what the source does. ``random`` draws
        everything fresh.
        """
        if init not in ("zero-identity", "random"):
            raise ValueError(f"unknown init {init!r}")
        domain = self.next_id
        self.next_id += 1
        self.domain_names[domain] = name if name is not None else f"domain-{domain}"
        rng = self.init_rng
        cfg = self.config
        copy_from = source if (init == "zero-identity" and source in self.domain_names
                               and source != domain) else None

        def param(value, path):
            return Tensor(value, requires_grad=True, name=f"domain/{domain}/{path}")

        adapters = []
        for i, block in enumerate(self.backbone.blocks):
            c = block.out_channels
            path = _block_path(cfg.backbone, i)
            if copy_from is not None:
                src = block.norms[copy_from]
                g1, b1 = src.gain1.data.copy(), src.bias1.data.copy()
                g2, b2 = src.gain2.data.copy(), src.bias2.data.copy()
            elif init == "random":
                g1, b1 = 1.0 + 0.1 * rng.normal(size=c), 0.1 * rng.normal(size=c)
                g2, b2 = 1.0 + 0.1 * rng.normal(size=c), 0.1 * rng.normal(size=c)
            else:
                g1, b1 = np.ones(c), np.zeros(c)
                g2, b2 = np.ones(c), np.zeros(c)
            block.norms[domain] = bb.BlockNorms(
                gain1=param(g1, f"backbone/{path}/norm1/gain"),
                bias1=param(b1, f"backbone/{path}/norm1/bias"),
                gain2=param(g2, f"backbone/{path}/norm2/gain"),
                bias2=param(b2, f"backbone/{path}/norm2/bias"),
            )
            if init == "random":
                alpha = 0.01 * rng.normal(size=(c, c, 1, 1))
            else:
                alpha = np.zeros((c, c, 1, 1))
            adapters.append(bb.ResidualAdapter(
                kernel=param(alpha, f"backbone/{path}/adapter/kernel"),
                domain_id=domain,
            ))
        self.backbone.adapters[domain] = adapters

        layer_adapters = []
        for i, layer in enumerate(self.seqnet.layers):
            d = cfg.d_model
            if copy_from is not None:
                src = layer.norms[copy_from]
                g1, b1 = src.gain1.data.copy(), src.bias1.data.copy()
                g2, b2 = src.gain2.data.copy(), src.bias2.data.copy()
            elif init == "random":
                g1, b1 = 1.0 + 0.1 * rng.normal(size=d), 0.1 * rng.normal(size=d)
                g2, b2 = 1.0 + 0.1 * rng.normal(size=d), 0.1 * rng.normal(size=d)
            else:
                g1, b1 = np.ones(d), np.zeros(d)
                g2, b2 = np.ones(d), np.zeros(d)
            layer.norms[domain] = sq.LayerNorms(
                gain1=param(g1, f"seqnet/layer{i}/norm1/gain"),
                bias1=param(b1, f"seqnet/layer{i}/norm1/bias"),
                gain2=param(g2, f"seqnet/layer{i}/norm2/gain"),
                bias2=param(b2, f"seqnet/layer{i}/norm2/bias"),
            )
            pair = []
            for slot in (1, 2):
                w_down = 0.01 * rng.normal(size=(d, cfg.bottleneck_dim))
                if init == "random":
                    w_up = 0.01 * rng.normal(size=(cfg.bottleneck_dim, d))
                else:
                    w_up = np.zeros((cfg.bottleneck_dim, d))
                pair.append(sq.BottleneckAdapter(
                    w_down=param(w_down, f"seqnet/layer{i}/adapter{slot}/w_down"),
                    b_down=param(np.zeros(cfg.bottleneck_dim), f"seqnet/layer{i}/adapter{slot}/b_down"),
                    w_up=param(w_up, f"seqnet/layer{i}/adapter{slot}/w_up"),
                    b_up=param(np.zeros(d), f"seqnet/layer{i}/adapter{slot}/b_up"),
                    domain_id=domain,
                ))
            layer_adapters.append(tuple(pair))
        self.seqnet.adapters[domain] = layer_adapters

        if copy_from is not None:
            src = self.seqnet.classifiers[copy_from]
            w, b = src.weight.data.copy(), src.bias.data.copy()
        else:
            w = 0.01 * rng.normal(size=(cfg.d_model, cfg.num_classes))
            b = np.zeros(cfg.num_classes)
        self.seqnet.classifiers[domain] = sq.ClassifierHead(
            weight=param(w, "classifier/weight"),
            bias=param(b, "classifier/bias"),
            domain_id=domain,
        )
        return domain

    def require_domain(self, domain: int) -> None:
        if domain not in self.domain_names:
            raise RoutingError(
                f"domain {domain} is not registered (registered: {sorted(self.domain_names)})"
            )

    # -- forward routing ----------------------------------------------------

    def features(self, image: Tensor, domain: int) -> Tensor:
        self.require_domain(domain)
        return bb.extract_features(image, self.backbone, domain)

    def logits(self, image: Tensor, domain: int) -> Tensor:
        """Per-timestep class log-probabilities for one image."""
        self.require_domain(domain)
        return sq.sequence_logits(self.features(image, domain), self.seqnet, domain)

    # -- parameter enumeration ----------------------------------------------

    def theta_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        cfg = self.config.backbone
        for i, block in enumerate(self.backbone.blocks):
            path = f"backbone/{_block_path(cfg, i)}"
            out[f"{path}/conv1/kernel"] = block.conv1_kernel
            out[f"{path}/conv1/bias"] = block.conv1_bias
            out[f"{path}/conv2/kernel"] = block.conv2_kernel
            out[f"{path}/conv2/bias"] = block.conv2_bias
            if block.proj_kernel is not None:
                out[f"{path}/proj/kernel"] = block.proj_kernel
        net = self.seqnet
        out["seqnet/input_proj/weight"] = net.in_proj_w
        out["seqnet/input_proj/bias"] = net.in_proj_b
        for i, layer in enumerate(net.layers):
            base = f"seqnet/layer{i}"
            for attr in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
                out[f"{base}/attn/{attr}"] = getattr(layer, attr)
            for attr in ("w1", "b1", "w2", "b2"):
                out[f"{base}/ff/{attr}"] = getattr(layer, attr)
        return out

    def phi_parameters(self, domain: int) -> "OrderedDict[str, Tensor]":
        self.require_domain(domain)
        out = OrderedDict()
        cfg = self.config.backbone
        prefix = f"domain/{domain}"
        for i, block in enumerate(self.backbone.blocks):
            path = f"{prefix}/backbone/{_block_path(cfg, i)}"
            norms = block.norms[domain]
            out[f"{path}/norm1/gain"] = norms.gain1
            out[f"{path}/norm1/bias"] = norms.bias1
            out[f"{path}/norm2/gain"] = norms.gain2
            out[f"{path}/norm2/bias"] = norms.bias2
            out[f"{path}/adapter/kernel"] = self.backbone.adapters[domain][i].kernel
        for i, layer in enumerate(self.seqnet.layers):
            base = f"{prefix}/seqnet/layer{i}"
            norms = layer.norms[domain]
            out[f"{base}/norm1/gain"] = norms.gain1
            out[f"{base}/norm1/bias"] = norms.bias1
            out[f"{base}/norm2/gain"] = norms.gain2
            out[f"{base}/norm2/bias"] = norms.bias2
            for slot, adapter in zip((1, 2), self.seqnet.adapters[domain][i]):
                out[f"{base}/adapter{slot}/w_down"] = adapter.w_down
                out[f"{base}/adapter{slot}/b_down"] = adapter.b_down
                out[f"{base}/adapter{slot}/w_up"] = adapter.w_up
                out[f"{base}/adapter{slot}/b_up"] = adapter.b_up
        head = self.seqnet.classifiers[domain]
        out[f"{prefix}/classifier/weight"] = head.weight
        out[f"{prefix}/classifier/bias"] = head.bias
        return out

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = self.theta_parameters()
        for domain in sorted(self.domain_names):
            out.update(self.phi_parameters(domain))
        return out

    def adapter_parameter_names(self, domain: int) -> set[str]:
        return {name for name in self.phi_parameters(domain) if "/adapter" in name}


def _block_path(cfg: BackboneConfig, index: int) -> str:
    module, block = divmod(index, cfg.blocks_per_module)
    return f"module{module}/block{block}"


def trainable_set(registry: DomainRegistry, mode: TrainMode) -> "OrderedDict[str, Tensor]":
    """Pick the parameters a mode may update, and freeze everything else.

    Frozen parameters get ``requires_grad`` cleared, so gradient accumulation
    into them is structurally impossible, not merely skipped.

    backbone: shared weights plus domain 0's norms and classifier. Domain 0's
    adapters stay frozen at their zero initialization during this phase, so a
    later zero-identity registration reproduces domain 0 exactly.
    adapter(d): domain d's bank only (adapters, norms, classifier).
    finetune(d): shared weights plus all of domain d's bank.
    """
    if mode.kind == "backbone":
        registry.require_domain(0)
        adapter_names = registry.adapter_parameter_names(0)
        chosen = registry.theta_parameters()
        for name, p in registry.phi_parameters(0).items():
            if name not in adapter_names:
                chosen[name] = p
    elif mode.kind == "adapter":
        chosen = registry.phi_parameters(mode.domain)
    else:  # finetune
        chosen = registry.theta_parameters()
        chosen.update(registry.phi_parameters(mode.domain))
    selected = set(chosen)
    for name, p in registry.named_parameters().items():
        p.requires_grad = name in selected
    return chosen


def count_trainable_params(registry: DomainRegistry, mode: TrainMode) -> int:
    return sum(p.size for p in trainable_set(registry, mode).values())


@dataclass
class AccessReport:
    reads: set[str]
    writes: set[str]

    def foreign_reads(self, domain: int) -> set[str]:
        """Parameter reads belonging to some other domain's bank."""
        return {n for n in self.reads
                if n.startswith("domain/") and not n.startswith(f"domain/{domain}/")}


def audit_access(registry: DomainRegistry, domain: int, forward) -> AccessReport:
    """Run ``forward()`` while recording every named parameter touched."""
    registry.require_domain(domain)
    with AccessLog() as log:
        forward()
    return AccessReport(reads=set(log.reads), writes=set(log.writes))
