"""Desk-scale classifier suite: four distinct small architectures, a training
harness, and an on-disk registry that enforces surrogate/held-out splits.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bpdac import EnsembleSpec
from .checkpoint import load_checkpoint, params_checksum, save_checkpoint
from .images import ImageBatch


@dataclass(frozen=True)
class ArchSpec:
    name: str
    depth: int
    width: int
    num_classes: int = 8


class _StrideNet(nn.Module):
    def __init__(self, M, w=16):
        super().__init__()
        self.c1 = nn.Conv2d(3, w, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1)
        self.n1 = nn.GroupNorm(4, w)
        self.n2 = nn.GroupNorm(4, 2 * w)
        self.n3 = nn.GroupNorm(4, 4 * w)
        self.fc = nn.Linear(4 * w * 4 * 4, M)

    def forward(self, x):
        h = F.relu(self.n1(self.c1(x)))
        h = F.relu(self.n2(self.c2(h)))
        h = F.relu(self.n3(self.c3(h)))
        return self.fc(h.flatten(1))


class _WideNet(nn.Module):
    def __init__(self, M, w=16):
        super().__init__()
        self.c1 = nn.Conv2d(3, w, 5, padding=2)
        self.c2 = nn.Conv2d(w, 2 * w, 5, padding=2)
        self.f1 = nn.Linear(2 * w * 4 * 4, 64)
        self.f2 = nn.Linear(64, M)

    def forward(self, x):
        h = F.avg_pool2d(x, 2)
        h = F.max_pool2d(F.relu(self.c1(h)), 2)
        h = F.max_pool2d(F.relu(self.c2(h)), 2)
        h = F.relu(self.f1(h.flatten(1)))
        return self.f2(h)


class _FullConvNet(nn.Module):
    def __init__(self, M, w=16):
        super().__init__()
        self.c1 = nn.Conv2d(3, int(1.5 * w), 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(int(1.5 * w), 3 * w, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(3 * w, 4 * w, 3, stride=2, padding=1)
        self.n1 = nn.GroupNorm(4, int(1.5 * w))
        self.n2 = nn.GroupNorm(4, 3 * w)
        self.n3 = nn.GroupNorm(4, 4 * w)
        self.head = nn.Conv2d(4 * w, M, 1)

    def forward(self, x):
        h = F.relu(self.n1(self.c1(x)))
        h = F.relu(self.n2(self.c2(h)))
        h = F.relu(self.n3(self.c3(h)))
        return self.head(h).amax(dim=(2, 3))


class _PixelMlpNet(nn.Module):
    def __init__(self, M, w=256):
        super().__init__()
        self.f1 = nn.Linear(3 * 32 * 32, w)
        self.f2 = nn.Linear(w, 64)
        self.f3 = nn.Linear(64, M)

    def forward(self, x):
        h = F.relu(self.f1(x.flatten(1)))
        h = F.relu(self.f2(h))
        return self.f3(h)


ARCHITECTURES = {
    "stride3x3": (ArchSpec("stride3x3", depth=4, width=16), _StrideNet),
    "wide5x5": (ArchSpec("wide5x5", depth=4, width=16), _WideNet),
    "fullconv": (ArchSpec("fullconv", depth=3, width=16), _FullConvNet),
    "pixelmlp": (ArchSpec("pixelmlp", depth=3, width=256), _PixelMlpNet),
}


class TorchClassifier:
    """Differentiable pixels -> probabilities map with a stable name.

    Inference is read-only; probabilities are produced in float64 so each
    row sums to one well inside the 1e-6 contract.
    """

    def __init__(self, name: str, net: nn.Module, num_classes: int):
        self.name = name
        self.net = net
        self.num_classes = num_classes
        self.net.eval()

    def logits(self, values: torch.Tensor) -> torch.Tensor:
        net_dtype = next(self.net.parameters()).dtype
        return self.net(values.to(net_dtype)).to(torch.float64)

    def probs(self, values: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(values), dim=-1)

    def __call__(self, values: torch.Tensor) -> torch.Tensor:
        return self.probs(values)

    def predict(self, values: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.probs(values).argmax(dim=-1)

    def as_double(self) -> "TorchClassifier":
        return TorchClassifier(self.name, copy.deepcopy(self.net).double(),
                               self.num_classes)


@dataclass
class ZooEntry:
    classifier: TorchClassifier
    arch: ArchSpec
    test_accuracy: float
    checksum: str


def accuracy(classifier: TorchClassifier, data: ImageBatch,
             batch_size: int = 512) -> float:
    hits = 0
    for start in range(0, len(data), batch_size):
        chunk = data.values[start:start + batch_size]
        hits += int((classifier.predict(chunk) == data.labels[start:start + batch_size]).sum())
    return hits / len(data)


def train_classifier(arch: ArchSpec | str, data: ImageBatch, epochs: int,
                     seed: int, test_data: ImageBatch | None = None,
                     batch_size: int = 256, lr: float = 2e-3) -> ZooEntry:
    """Train one zoo classifier; deterministic given the seed.

    Light input noise and label smoothing keep the nets tolerant of
    generated images without making them artificially brittle. When no test
    split is given, a tenth of the data is held out for the accuracy record.
    """
    if isinstance(arch, str):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
        arch = ARCHITECTURES[arch][0]
    if len(data) == 0:
        raise ValueError("training data is empty")
    if data.labels is None:
        raise ValueError("classifier training needs labeled data")

    net_cls = ARCHITECTURES[arch.name][1]
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = net_cls(arch.num_classes, arch.width)
        gen = torch.Generator().manual_seed(seed + 1)

        if test_data is None:
            perm = torch.randperm(len(data), generator=gen)
            n_test = max(1, len(data) // 10)
            test_data = data.subset(perm[:n_test])
            data = data.subset(perm[n_test:])

        x_all = data.values.to(torch.float32)
        y_all = data.labels
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        net.train()
        for _ in range(max(0, epochs)):
            perm = torch.randperm(len(x_all), generator=gen)
            for start in range(0, len(perm), batch_size):
                idx = perm[start:start + batch_size]
                x = x_all[idx] + 0.05 * torch.randn(x_all[idx].shape, generator=gen)
                loss = F.cross_entropy(net(x), y_all[idx], label_smoothing=0.05)
                opt.zero_grad()
                loss.backward()
                opt.step()
        net.eval()

    classifier = TorchClassifier(arch.name, net, arch.num_classes)
    return ZooEntry(
        classifier=classifier,
        arch=arch,
        test_accuracy=accuracy(classifier, test_data),
        checksum=params_checksum(net.state_dict()),
    )


class ZooRegistry:
    """Directory of classifier checkpoints plus a JSON index."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.index_path = self.root / "zoo.json"
        self._index: dict[str, dict] = {}
        if self.index_path.exists():
            self._index = json.loads(self.index_path.read_text())

    def _write_index(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path.write_text(json.dumps(self._index, indent=2, sort_keys=True))

    def register(self, entry: ZooEntry) -> None:
        name = entry.arch.name
        file = f"{name}.pt"
        save_checkpoint(self.root / file, "classifier", entry.classifier.net.state_dict(), {
            "arch": {"name": entry.arch.name, "depth": entry.arch.depth,
                     "width": entry.arch.width, "num_classes": entry.arch.num_classes},
            "test_accuracy": entry.test_accuracy,
        })
        self._index[name] = {
            "file": file,
            "test_accuracy": entry.test_accuracy,
            "checksum": entry.checksum,
        }
        self._write_index()

    def names(self) -> list[str]:
        return sorted(self._index)

    def load(self, name: str) -> ZooEntry:
        if name not in self._index:
            raise KeyError(f"no classifier {name!r} in registry; have {self.names()}")
        payload = load_checkpoint(self.root / self._index[name]["file"], "classifier")
        meta = payload["meta"]
        arch = ArchSpec(**meta["arch"])
        net = ARCHITECTURES[arch.name][1](arch.num_classes, arch.width)
        net.load_state_dict(payload["state"])
        net.eval()
        return ZooEntry(
            classifier=TorchClassifier(arch.name, net, arch.num_classes),
            arch=arch,
            test_accuracy=meta["test_accuracy"],
            checksum=payload["checksum"],
        )

    def split(self, surrogates: list[str], held_out: str,
              betas: list[float] | None = None) -> tuple[EnsembleSpec, TorchClassifier]:
        """Black-box split: surrogate ensemble plus a disjoint held-out model."""
        if held_out in surrogates:
            raise ValueError(f"held-out model {held_out!r} appears in the surrogate list")
        if len(set(surrogates)) != len(surrogates):
            raise ValueError("surrogate names must be unique")
        ensemble = EnsembleSpec(
            surrogates=[self.load(n).classifier for n in surrogates],
            betas=betas if betas is not None else [1.0] * len(surrogates),
        )
        return ensemble, self.load(held_out).classifier
