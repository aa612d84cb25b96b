# task_zoo.py
# Desk-scale target tasks for nowcasting experiments
# -------------------------------------------------------------
# Features
# - ConvNets (three stride-2 3x3 convs, average pool, linear) on
#   FashionMNIST / CIFAR-10 / synthetic images
# - GPT-2 style pre-LN decoders ("L-d", e.g. 2-32) on a local text corpus
#   (tiktoken gpt2 tokenizer) or a synthetic Markov-chain corpus
# - models are built from an ArchSpec so torch parameter order and the
#   neural-graph layout agree by construction
# - Adam/AdamW training steps, accuracy / perplexity evaluation
# -------------------------------------------------------------

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from errors import DataMissingError, InvalidSpecError, NonFiniteLossError
from neural_graph import ArchSpec, LayerSpec, convnet_spec, transformer_spec

logger = logging.getLogger(__name__)

# --------------------------- Constants ---------------------------

DATA_ROOT_ENV = "NOWCAST_DATA_ROOT"
DEFAULT_DATA_ROOT = "~/.cache/nino-nowcast"
GPT2_VOCAB = 50257
BYTE_VOCAB = 256
NUM_CLASSES = 10
SYNTH_IMAGE_SIZE = 12       # pixels per side
SYNTH_TRAIN, SYNTH_VAL = 2048, 512
SYNTH_TEXT_TOKENS = 200_000
SYNTH_TEXT_SUCCESSORS = 4   # likely next tokens per token
DATA_SEED = 0               # synthetic data is fixed; seeds vary the model only
EMBED_INIT_STD = 0.02

# dataset -> (kind, input channels, normalization mean, std)
DATASETS: Dict[str, Tuple[str, int, Tuple[float, ...], Tuple[float, ...]]] = {
    "fashion_mnist": ("image", 1, (0.2860,), (0.3530,)),
    "cifar10": ("image", 3, (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "synthetic_images": ("image", 1, (0.0,), (1.0,)),
    "lm_text": ("text", 0, (), ()),
    "synthetic_text": ("text", 0, (), ()),
}


def data_root(override: Optional[str] = None) -> Path:
    return Path(override or os.environ.get(DATA_ROOT_ENV, DEFAULT_DATA_ROOT)).expanduser()


# =========================
# Task specs
# =========================
@dataclass
class TaskSpec:
    task_id: str
    dataset: str
    model: str = "cnn"                      # cnn | gpt
    channels: Tuple[int, ...] = (16, 32, 32)
    d_model: int = 32
    n_layers: int = 2
    heads: int = 2
    seq_len: int = 256
    tokenizer: str = "gpt2"                 # gpt2 | byte | synthetic
    vocab_size: int = 64                    # synthetic tokenizer only
    tied: bool = True
    optimizer: str = "adam"                 # adam | adamw
    lr: float = 6e-3
    weight_decay: float = 0.0
    batch_size: int = 128
    total_steps: int = 10_000
    metric: str = "accuracy"                # accuracy | perplexity
    target: float = 89.5
    eval_every: int = 100
    eval_batches: int = 8                   # text validation batches

    def validate(self) -> List[str]:
        problems = []
        if self.dataset not in DATASETS:
            problems.append(f"task {self.task_id}: unknown dataset '{self.dataset}'")
        if self.model not in ("cnn", "gpt"):
            problems.append(f"task {self.task_id}: unknown model '{self.model}'")
        if self.optimizer not in ("adam", "adamw"):
            problems.append(f"task {self.task_id}: optimizer must be adam or adamw")
        if self.metric not in ("accuracy", "perplexity"):
            problems.append(f"task {self.task_id}: metric must be accuracy or perplexity")
        if self.tokenizer not in ("gpt2", "byte", "synthetic"):
            problems.append(f"task {self.task_id}: unknown tokenizer '{self.tokenizer}'")
        for name in ("lr", "batch_size", "total_steps", "eval_every"):
            if getattr(self, name) <= 0:
                problems.append(f"task {self.task_id}: {name} must be positive")
        return problems

    @property
    def vocab(self) -> int:
        return {"gpt2": GPT2_VOCAB, "byte": BYTE_VOCAB}.get(self.tokenizer, self.vocab_size)

    def arch_spec(self) -> ArchSpec:
        if self.model == "cnn":
            spec = convnet_spec(DATASETS[self.dataset][1], self.channels, NUM_CLASSES)
        else:
            spec = transformer_spec(self.vocab, self.d_model, self.n_layers, self.heads,
                                    self.seq_len, tied=self.tied)
        return spec


def _vision(task_id: str, dataset: str, channels: Tuple[int, ...], lr: float, target: float) -> TaskSpec:
    return TaskSpec(task_id, dataset, "cnn", channels=channels, lr=lr, target=target)


def _language(task_id: str, n_layers: int, d: int, heads: int, target: float) -> TaskSpec:
    return TaskSpec(task_id, "lm_text", "gpt", d_model=d, n_layers=n_layers, heads=heads,
                    optimizer="adamw", lr=2e-4, weight_decay=1e-2, batch_size=32,
                    total_steps=24_000, metric="perplexity", target=target, eval_every=500)


TASKS: Dict[str, TaskSpec] = {
    "fm-16": _vision("fm-16", "fashion_mnist", (16, 32, 32), 6e-3, 89.5),
    "fm-32": _vision("fm-32", "fashion_mnist", (32, 64, 64), 6e-3, 90.5),
    "c10-16": _vision("c10-16", "cifar10", (16, 32, 32), 3e-3, 66.0),
    "c10-32": _vision("c10-32", "cifar10", (32, 64, 64), 3e-3, 72.5),
    "text-3-24": _language("text-3-24", 3, 24, 3, 352.0),
    "text-2-32": _language("text-2-32", 2, 32, 2, 319.0),
    "text-3-64": _language("text-3-64", 3, 64, 4, 181.0),
    "synth-img-16": TaskSpec("synth-img-16", "synthetic_images", "cnn", lr=6e-3, batch_size=64,
                             total_steps=2000, target=90.0, eval_every=50),
    "synth-text-2-16": TaskSpec("synth-text-2-16", "synthetic_text", "gpt", d_model=16, n_layers=2,
                                heads=2, seq_len=32, tokenizer="synthetic", optimizer="adamw",
                                lr=3e-3, weight_decay=1e-2, batch_size=16, total_steps=2000,
                                metric="perplexity", target=12.0, eval_every=50),
}


# =========================
# Models
# =========================
def attention(x: torch.Tensor, wq: torch.Tensor, bq: Optional[torch.Tensor],
              wk: torch.Tensor, bk: Optional[torch.Tensor],
              wv: torch.Tensor, bv: Optional[torch.Tensor],
              wo: torch.Tensor, bo: Optional[torch.Tensor],
              heads: int, causal: bool = False) -> torch.Tensor:
    """Multi-head self-attention on x [B, T, d]; scores scaled by 1/sqrt(d).

    Weights use the nn.Linear layout [out, in]; head h owns rows
    h*d/H..(h+1)*d/H of W^q, W^k, W^v and the matching columns of W^o.
    """
    B, T, d = x.shape
    if d % heads != 0:
        raise InvalidSpecError(f"hidden size {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t: torch.Tensor) -> torch.Tensor:
        return t.view(B, T, heads, dh).transpose(1, 2)

    q, k, v = split(F.linear(x, wq, bq)), split(F.linear(x, wk, bk)), split(F.linear(x, wv, bv))
    scores = q @ k.transpose(-2, -1) / math.sqrt(d)
    if causal:
        mask = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
    y = (scores.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, T, d)
    return F.linear(y, wo, bo)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, bias: bool = True, causal: bool = True) -> None:
        super().__init__()
        self.heads = heads
        self.causal = causal
        self.q = nn.Linear(d, d, bias=bias)
        self.k = nn.Linear(d, d, bias=bias)
        self.v = nn.Linear(d, d, bias=bias)
        self.o = nn.Linear(d, d, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return attention(x, self.q.weight, self.q.bias, self.k.weight, self.k.bias,
                         self.v.weight, self.v.bias, self.o.weight, self.o.bias,
                         self.heads, self.causal)


def _layer_module(layer: LayerSpec) -> nn.Module:
    if layer.kind == "linear":
        return nn.Identity() if layer.tied else nn.Linear(layer.fan_in, layer.fan_out, bias=layer.bias)
    if layer.kind == "conv":
        return nn.Conv2d(layer.fan_in, layer.fan_out, (layer.h, layer.w), stride=2,
                         padding=(layer.h // 2, layer.w // 2), bias=layer.bias)
    if layer.kind == "embedding":
        return nn.Embedding(layer.fan_in, layer.fan_out)
    if layer.kind == "layernorm":
        return nn.LayerNorm(layer.fan_out, elementwise_affine=True)
    if layer.kind == "msa":
        return MultiHeadSelfAttention(layer.fan_in, layer.heads, bias=layer.bias)
    return nn.Identity()


class SpecNet(nn.Module):
    """A network whose parameters() order is the ArchSpec's flat layout."""

    def __init__(self, spec: ArchSpec) -> None:
        super().__init__()
        spec.validate()
        self.spec = spec
        self.blocks = nn.ModuleList(_layer_module(l) for l in spec.layers)
        for mod in self.blocks:
            if isinstance(mod, nn.Embedding):
                nn.init.normal_(mod.weight, std=EMBED_INIT_STD)
        self.act = nn.GELU() if spec.activation == "gelu" else nn.ReLU()
        self._token_embedding = next((i for i, l in enumerate(spec.layers)
                                      if l.kind == "embedding" and not l.accumulate), None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        layers = self.spec.layers
        outs: List[torch.Tensor] = []
        for i, (layer, mod) in enumerate(zip(layers, self.blocks)):
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            if layer.kind == "conv":
                x = self.act(mod(x))
            elif layer.kind == "linear":
                if x.dim() == 4:
                    x = x.mean(dim=(2, 3))
                if layer.tied:
                    x = x @ self.blocks[self._token_embedding].weight.T
                else:
                    x = mod(x)
                if nxt is not None and nxt.kind == "linear" and not nxt.lm_head:
                    x = self.act(x)
            elif layer.kind == "embedding" and layer.accumulate:
                x = x + mod(torch.arange(x.size(1), device=x.device))
            elif layer.kind == "residual":
                x = x + outs[layer.source]
            else:
                x = mod(x)
            outs.append(x)
        return x


def get_flat(model: nn.Module) -> torch.Tensor:
    return parameters_to_vector(model.parameters()).detach().clone()


def set_flat(model: nn.Module, flat: torch.Tensor) -> None:
    with torch.no_grad():
        vector_to_parameters(flat.to(next(model.parameters())), model.parameters())


# =========================
# Data
# =========================
class ImageStream:
    def __init__(self, x: torch.Tensor, y: torch.Tensor, batch_size: int, seed: int) -> None:
        self.x, self.y, self.batch_size = x, y, batch_size
        self.rng = np.random.default_rng(seed)

    def next(self) -> Tuple[torch.Tensor, torch.Tensor]:
        idx = torch.from_numpy(self.rng.integers(0, len(self.x), self.batch_size))
        return self.x[idx], self.y[idx]


class TextStream:
    def __init__(self, tokens: torch.Tensor, seq_len: int, batch_size: int, seed: int) -> None:
        if len(tokens) <= seq_len + 1:
            raise InvalidSpecError(f"corpus of {len(tokens)} tokens shorter than sequence length {seq_len}")
        self.tokens, self.seq_len, self.batch_size = tokens, seq_len, batch_size
        self.rng = np.random.default_rng(seed)

    def next(self) -> Tuple[torch.Tensor, torch.Tensor]:
        starts = self.rng.integers(0, len(self.tokens) - self.seq_len - 1, self.batch_size)
        x = torch.stack([self.tokens[s:s + self.seq_len] for s in starts])
        y = torch.stack([self.tokens[s + 1:s + 1 + self.seq_len] for s in starts])
        return x, y


def _normalize(x: torch.Tensor, mean: Tuple[float, ...], std: Tuple[float, ...]) -> torch.Tensor:
    m = torch.tensor(mean).view(1, -1, 1, 1)
    s = torch.tensor(std).view(1, -1, 1, 1)
    return (x - m) / s


def _torchvision_split(name: str, root: Path, train: bool) -> Tuple[torch.Tensor, torch.Tensor]:
    import torchvision

    cls = {"fashion_mnist": torchvision.datasets.FashionMNIST, "cifar10": torchvision.datasets.CIFAR10}[name]
    try:
        ds = cls(str(root / name), train=train, download=False)
    except RuntimeError as exc:
        raise DataMissingError(name, str(root), f"Fetch it once with torchvision.datasets.{cls.__name__}"
                               f"(root='{root / name}', download=True). ({exc})") from exc
    data = torch.as_tensor(np.asarray(ds.data)).float() / 255.0
    data = data.unsqueeze(1) if data.dim() == 3 else data.permute(0, 3, 1, 2)
    _, _, mean, std = DATASETS[name]
    return _normalize(data, mean, std), torch.as_tensor(np.asarray(ds.targets)).long()


def synthetic_images(n: int, seed: int = DATA_SEED) -> Tuple[torch.Tensor, torch.Tensor]:
    """Ten noisy class prototypes; prototypes fixed by DATA_SEED."""
    protos = np.random.default_rng(DATA_SEED).normal(size=(NUM_CLASSES, 1, SYNTH_IMAGE_SIZE, SYNTH_IMAGE_SIZE))
    rng = np.random.default_rng(seed)
    y = np.arange(n) % NUM_CLASSES
    x = protos[y] + 0.8 * rng.normal(size=(n, 1, SYNTH_IMAGE_SIZE, SYNTH_IMAGE_SIZE))
    return torch.from_numpy(x).float(), torch.from_numpy(y).long()


def synthetic_text(n_tokens: int, vocab: int, seed: int = DATA_SEED) -> torch.Tensor:
    """Markov chain with a few likely successors per token."""
    rng = np.random.default_rng(seed)
    succ = rng.integers(0, vocab, size=(vocab, SYNTH_TEXT_SUCCESSORS))
    out = np.empty(n_tokens, dtype=np.int64)
    out[0] = 0
    choice = rng.integers(0, SYNTH_TEXT_SUCCESSORS, n_tokens)
    for i in range(1, n_tokens):
        out[i] = succ[out[i - 1], choice[i]]
    return torch.from_numpy(out)


def _text_corpus(spec: TaskSpec, root: Path) -> Tuple[torch.Tensor, torch.Tensor]:
    if spec.dataset == "synthetic_text":
        tokens = synthetic_text(SYNTH_TEXT_TOKENS, spec.vocab)
    else:
        folder = root / "text"
        paths = [folder / "train.txt", folder / "valid.txt"]
        missing = [p for p in paths if not p.is_file()]
        if missing:
            raise DataMissingError("lm_text", str(root), f"Place plain-text train.txt and valid.txt in {folder}.")
        if spec.tokenizer == "gpt2":
            import tiktoken

            enc = tiktoken.get_encoding("gpt2")
            train, val = (torch.tensor(enc.encode_ordinary(p.read_text(encoding="utf-8")), dtype=torch.long)
                          for p in paths)
        else:
            train, val = (torch.tensor(list(p.read_bytes()), dtype=torch.long) for p in paths)
        logger.info("tokenized corpus: %d train / %d valid tokens", len(train), len(val))
        return train, val
    split = int(0.9 * len(tokens))
    return tokens[:split], tokens[split:]


# =========================
# Tasks
# =========================
@dataclass
class Task:
    spec: TaskSpec
    arch: ArchSpec
    model: SpecNet
    train: object                # ImageStream | TextStream
    val: Tuple[torch.Tensor, torch.Tensor]
    seed: int = 0
    history: List[float] = field(default_factory=list)


def build_task(spec: TaskSpec, root: Optional[str] = None, seed: int = 0) -> Task:
    """Model with deterministic init under seed, plus train/validation data."""
    problems = spec.validate()
    if problems:
        raise InvalidSpecError("; ".join(problems))
    root_path = data_root(root)
    kind = DATASETS[spec.dataset][0]
    if kind == "image":
        if spec.dataset == "synthetic_images":
            train, val = synthetic_images(SYNTH_TRAIN, seed=1), synthetic_images(SYNTH_VAL, seed=2)
        else:
            train = _torchvision_split(spec.dataset, root_path, True)
            val = _torchvision_split(spec.dataset, root_path, False)
        stream = ImageStream(*train, spec.batch_size, seed)
    else:
        train_tok, val_tok = _text_corpus(spec, root_path)
        stream = TextStream(train_tok, spec.seq_len, spec.batch_size, seed)
        val_stream = TextStream(val_tok, spec.seq_len, spec.batch_size, DATA_SEED)
        batches = [val_stream.next() for _ in range(spec.eval_batches)]
        val = (torch.cat([b[0] for b in batches]), torch.cat([b[1] for b in batches]))
    arch = spec.arch_spec()
    torch.manual_seed(seed)
    model = SpecNet(arch)
    logger.info("built task %s (seed %d): %d parameters", spec.task_id, seed, arch.num_params)
    return Task(spec, arch, model, stream, val, seed)


def make_optimizer(task: Task) -> torch.optim.Optimizer:
    s = task.spec
    if s.optimizer == "adamw":
        return torch.optim.AdamW(task.model.parameters(), lr=s.lr, weight_decay=s.weight_decay)
    return torch.optim.Adam(task.model.parameters(), lr=s.lr, weight_decay=s.weight_decay)


def _loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.size(-1)), y.reshape(-1))


def train_steps(task: Task, optimizer: torch.optim.Optimizer, n: int, step_offset: int = 0) -> List[float]:
    """Exactly n optimizer steps; returns the training loss of each."""
    task.model.train()
    losses: List[float] = []
    for i in range(n):
        x, y = task.train.next()
        loss = _loss(task.model(x), y)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(step_offset + i + 1, value)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(value)
    task.history.extend(losses)
    return losses


def perplexity_from_logits(logits: torch.Tensor, targets: torch.Tensor) -> float:
    return float(torch.exp(_loss(logits, targets)))


@torch.no_grad()
def evaluate(task: Task, batch_size: int = 1000) -> float:
    """Validation accuracy in percent, or perplexity exp(mean cross-entropy)."""
    task.model.eval()
    x_all, y_all = task.val
    total_loss, correct, count = 0.0, 0, 0
    for start in range(0, len(x_all), batch_size):
        x, y = x_all[start:start + batch_size], y_all[start:start + batch_size]
        logits = task.model(x)
        total_loss += float(F.cross_entropy(logits.reshape(-1, logits.size(-1)), y.reshape(-1), reduction="sum"))
        correct += int((logits.argmax(-1) == y).sum())
        count += y.numel()
    task.model.train()
    if task.spec.metric == "accuracy":
        return 100.0 * correct / count
    return math.exp(total_loss / count)


def reached(metric: str, value: float, target: float) -> bool:
    return value >= target if metric == "accuracy" else value <= target
