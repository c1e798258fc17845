"""The four benchmark CNNs with a replaced two-class head.

Backbones come from torchvision's published definitions and ImageNet
weights. Shallow fine-tuning keeps every backbone tensor frozen and trains
only the final classification layer, whatever its form: a linear layer
for AlexNet, VGG-11-BN and DenseNet-121, the last 1x1 convolution for
SqueezeNet.
"""
from __future__ import annotations

import hashlib
import json
import urllib.error
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import torch
import torchvision
from torch import nn

from .exceptions import ValidationError, WeightsCorruptError, WeightsUnavailableError

INPUT_SIZE = 224


class ArchitectureId(str, Enum):
    ALEXNET = "AlexNet"
    VGG11BN = "VGG11BN"
    SQUEEZENET = "SqueezeNet"
    DENSENET121 = "DenseNet121"

    @classmethod
    def coerce(cls, value) -> "ArchitectureId":
        if isinstance(value, cls):
            return value
        key = str(value).replace("-", "").replace("_", "").lower()
        for arch in cls:
            if arch.value.lower() == key or arch.name.lower() == key:
                return arch
        raise ValidationError(f"unknown architecture {value!r}; choose from {[a.value for a in cls]}")


@dataclass(frozen=True)
class _ArchSpec:
    builder: Callable[..., nn.Module]
    weights: torchvision.models.WeightsEnum
    head: str  # dotted module path of the final classification layer


_ARCHS = {
    ArchitectureId.ALEXNET: _ArchSpec(
        torchvision.models.alexnet, torchvision.models.AlexNet_Weights.IMAGENET1K_V1, "classifier.6"),
    ArchitectureId.VGG11BN: _ArchSpec(
        torchvision.models.vgg11_bn, torchvision.models.VGG11_BN_Weights.IMAGENET1K_V1, "classifier.6"),
    # SqueezeNet 1.0 is the variant defined in the original SqueezeNet publication.
    ArchitectureId.SQUEEZENET: _ArchSpec(
        torchvision.models.squeezenet1_0, torchvision.models.SqueezeNet1_0_Weights.IMAGENET1K_V1, "classifier.1"),
    ArchitectureId.DENSENET121: _ArchSpec(
        torchvision.models.densenet121, torchvision.models.DenseNet121_Weights.IMAGENET1K_V1, "classifier"),
}


@dataclass
class ModelBundle:
    architecture: ArchitectureId
    module: nn.Module
    head_name: str
    head_parameter_names: frozenset[str]
    pretrained_provenance: str
    num_classes: int = 2
    input_size: int = INPUT_SIZE

    @property
    def parameter_map(self) -> dict[str, torch.Tensor]:
        return dict(self.module.named_parameters())

    @property
    def head(self) -> nn.Module:
        return self.module.get_submodule(self.head_name)


@dataclass
class FreezePlan:
    trainable: dict[str, bool] = field(default_factory=dict)

    @property
    def trainable_names(self) -> list[str]:
        return [n for n, t in self.trainable.items() if t]

    @property
    def frozen_names(self) -> list[str]:
        return [n for n, t in self.trainable.items() if not t]


def _fetch_state_dict(spec: _ArchSpec, weights_path: str | Path | None) -> tuple[dict, str]:
    if weights_path is not None:
        path = Path(weights_path)
        if not path.is_file():
            raise WeightsUnavailableError(f"offline: weights file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise WeightsCorruptError(f"corrupt: cannot decode weights file {path}: {exc}") from exc
        if not isinstance(state, dict):
            raise WeightsCorruptError(f"corrupt: {path} does not hold a state dict")
        return state, f"local file {path}"
    try:
        state = spec.weights.get_state_dict(progress=False, check_hash=True)
    except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
        raise WeightsUnavailableError(
            f"offline: cannot download {spec.weights.url} ({exc}); place the file in the torch hub "
            "cache or pass weights_path") from exc
    except RuntimeError as exc:
        raise WeightsCorruptError(f"corrupt: {spec.weights.url} failed verification or decoding: {exc}") from exc
    return state, f"torchvision {spec.weights} ({spec.weights.url})"


def _new_head(old: nn.Module, num_classes: int) -> nn.Module:
    if isinstance(old, nn.Linear):
        return nn.Linear(old.in_features, num_classes)
    if isinstance(old, nn.Conv2d):
        return nn.Conv2d(old.in_channels, num_classes, kernel_size=old.kernel_size)
    raise ValidationError(f"unsupported head layer type {type(old).__name__}")


def build_model(
    arch: ArchitectureId | str,
    num_classes: int = 2,
    pretrained: bool = True,
    seed: int = 0,
    weights_path: str | Path | None = None,
) -> ModelBundle:
    """Instantiate ``arch`` with ImageNet weights and a fresh ``num_classes`` head.

    The head uses PyTorch's default fan-in uniform initialization drawn
    under ``seed``. With ``pretrained=False`` the backbone is randomly
    initialized under the same seed (intended for tests).
    """
    arch = ArchitectureId.coerce(arch)
    if int(num_classes) != num_classes or num_classes < 2:
        raise ValidationError(f"num_classes must be an integer >= 2, got {num_classes!r}")
    spec = _ARCHS[arch]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = spec.builder(weights=None)
        if pretrained:
            state, provenance = _fetch_state_dict(spec, weights_path)
            try:
                module.load_state_dict(state)
            except RuntimeError as exc:
                raise WeightsCorruptError(f"corrupt: state dict does not match {arch.value}: {exc}") from exc
        else:
            provenance = f"random initialization (seed {seed})"
        parent_name, _, attr = spec.head.rpartition(".")
        parent = module.get_submodule(parent_name) if parent_name else module
        torch.manual_seed(seed)
        setattr(parent, attr, _new_head(getattr(parent, attr), num_classes))
    if arch is ArchitectureId.SQUEEZENET:
        module.num_classes = num_classes
    head_names = frozenset(f"{spec.head}.{n}" for n, _ in module.get_submodule(spec.head).named_parameters())
    return ModelBundle(arch, module, spec.head, head_names, provenance, int(num_classes))


def apply_sft(model: ModelBundle) -> FreezePlan:
    """Freeze the backbone; only the head's parameters stay trainable."""
    names = dict(model.module.named_parameters())
    if not model.head_parameter_names or not model.head_parameter_names <= names.keys():
        raise ValidationError("model head is empty or not part of the parameter map")
    plan = FreezePlan({n: n in model.head_parameter_names for n in names})
    for n, p in names.items():
        p.requires_grad_(plan.trainable[n])
    return plan


def set_training_mode(model: ModelBundle, freeze_batchnorm: bool = True) -> None:
    """Training mode for dropout and head; backbone batch-norm keeps its running stats."""
    model.module.train()
    if not freeze_batchnorm:
        return
    head = model.head
    for sub in model.module.modules():
        if isinstance(sub, nn.modules.batchnorm._BatchNorm) and not _contains(head, sub):
            sub.eval()


def _contains(parent: nn.Module, child: nn.Module) -> bool:
    return any(m is child for m in parent.modules())


def check_input(model: ModelBundle, batch: torch.Tensor) -> None:
    if not isinstance(batch, torch.Tensor):
        raise ValidationError(f"expected a torch.Tensor batch, got {type(batch).__name__}")
    expected = (3, model.input_size, model.input_size)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected or batch.shape[0] < 1:
        raise ValidationError(f"expected input of shape B x {' x '.join(map(str, expected))}, got {tuple(batch.shape)}")


def forward(model: ModelBundle, batch: torch.Tensor) -> torch.Tensor:
    """Logits of shape ``B x num_classes``; column 0 is PositiveCOVID."""
    check_input(model, batch)
    return model.module(batch)


def extract_features(model: ModelBundle, batch: torch.Tensor) -> torch.Tensor:
    """Input tensor the head receives for ``batch`` (captured by a forward hook)."""
    check_input(model, batch)
    captured = {}
    handle = model.head.register_forward_hook(lambda mod, inputs, out: captured.setdefault("x", inputs[0]))
    try:
        model.module(batch)
    finally:
        handle.remove()
    return captured["x"]


def head_logits(model: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    """Map captured head inputs to logits, replaying any layers after the head."""
    out = model.head(features)
    if model.architecture is ArchitectureId.SQUEEZENET:
        # classifier = Dropout, Conv1x1 (head), ReLU, AdaptiveAvgPool
        out = torch.flatten(nn.functional.adaptive_avg_pool2d(torch.relu(out), 1), 1)
    return out


def parameter_count(model: ModelBundle, names=None) -> int:
    params = model.parameter_map
    names = params.keys() if names is None else names
    return sum(params[n].numel() for n in names)


def state_checksum(model: ModelBundle, names=None) -> str:
    """SHA-256 over the raw bytes of the named parameters and all buffers."""
    h = hashlib.sha256()
    params = model.parameter_map
    for n in sorted(params if names is None else names):
        h.update(n.encode())
        h.update(params[n].detach().cpu().contiguous().numpy().tobytes())
    for n, b in sorted(model.module.named_buffers()):
        h.update(n.encode())
        h.update(b.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def backbone_checksum(model: ModelBundle) -> str:
    names = [n for n in model.parameter_map if n not in model.head_parameter_names]
    return state_checksum(model, names)


def save_checkpoint(model: ModelBundle, path: str | Path, config_hash: str = "", head_only: bool = False) -> Path:
    """Write a torch checkpoint plus ``<path>.json`` descriptor.

    ``head_only`` stores just the head tensors; reloading then rebuilds the
    backbone from the recorded pretrained source.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.module.state_dict()
    if head_only:
        state = {k: v for k, v in state.items() if k.startswith(model.head_name + ".")}
    torch.save({
        "architecture": model.architecture.value,
        "num_classes": model.num_classes,
        "head_parameter_names": sorted(model.head_parameter_names),
        "pretrained_provenance": model.pretrained_provenance,
        "config_hash": config_hash,
        "head_only": head_only,
        "state_dict": state,
    }, path)
    descriptor = {
        "checkpoint": path.name,
        "architecture": model.architecture.value,
        "num_classes": model.num_classes,
        "head_parameter_names": sorted(model.head_parameter_names),
        "pretrained_provenance": model.pretrained_provenance,
        "config_hash": config_hash,
        "head_only": head_only,
        "parameters": {n: list(p.shape) for n, p in model.parameter_map.items()},
    }
    Path(str(path) + ".json").write_text(json.dumps(descriptor, indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path, pretrained: bool = True, seed: int = 0,
                    weights_path: str | Path | None = None) -> ModelBundle:
    """Rebuild a bundle from :func:`save_checkpoint` output.

    ``pretrained``/``seed``/``weights_path`` matter only for head-only files.
    """
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightsCorruptError(f"corrupt: cannot read checkpoint {path}: {exc}") from exc
    bundle = build_model(blob["architecture"], blob["num_classes"],
                         pretrained=pretrained and blob["head_only"], seed=seed, weights_path=weights_path)
    bundle.module.load_state_dict(blob["state_dict"], strict=not blob["head_only"])
    bundle.pretrained_provenance = blob["pretrained_provenance"]
    return bundle
