#!/usr/bin/env python3
"""
Models - Hypothesis (g, h, d) assembly and the hypothesis pair with its sharing modes.
"""
import copy
import logging
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor
from config import ArchConfig, SharingMode
from layers import (BatchNorm, Conv2d, Dense, Dropout, Flatten, ForwardContext, GaussianNoise,
                    GlobalAvgPool, LeakyReLU, MaxPool, ReLU, Sequential)

logger = logging.getLogger(__name__)


def _bn(arch: ArchConfig, width: int, n_sets: int) -> List:
    if not arch.batchnorm:
        return []
    return [BatchNorm(width, n_sets=n_sets, momentum=arch.bn_momentum, eps=arch.bn_eps)]


def _stochastic(arch: ArchConfig) -> List:
    layers = []
    if arch.dropout > 0:
        layers.append(Dropout(arch.dropout))
    if arch.noise_std > 0:
        layers.append(GaussianNoise(arch.noise_std))
    return layers


def resolve_kind(arch: ArchConfig, input_shape: Tuple[int, ...]) -> str:
    if arch.kind != "auto":
        return arch.kind
    return "conv" if len(input_shape) == 3 else "dense"


def build_generator(arch: ArchConfig, input_shape: Tuple[int, ...], n_sets: int,
                    rng: np.random.Generator) -> Tuple[Sequential, Tuple[int, ...]]:
    """Feature generator g and the shape of its per-sample output."""
    if resolve_kind(arch, input_shape) == "dense":
        (d_in,) = input_shape
        h = arch.hidden
        layers = [Dense(d_in, h, rng), *_bn(arch, h, n_sets), ReLU(), *_stochastic(arch),
                  Dense(h, h, rng), *_bn(arch, h, n_sets), ReLU()]
        return Sequential(layers), (h,)

    c, height, width = input_shape
    c1, c2, c3 = arch.conv_channels
    act = arch.leaky_slope
    layers = [Conv2d(c, c1, 3, rng), *_bn(arch, c1, n_sets), LeakyReLU(act),
              Conv2d(c1, c2, 3, rng), *_bn(arch, c2, n_sets), LeakyReLU(act),
              MaxPool(), *_stochastic(arch),
              Conv2d(c2, c3, 3, rng), *_bn(arch, c3, n_sets), LeakyReLU(act)]
    return Sequential(layers), (c3, height // 2, width // 2)


def build_head(arch: ArchConfig, feature_shape: Tuple[int, ...], n_classes: int, n_sets: int,
               rng: np.random.Generator) -> Sequential:
    """Classifier head h producing logits."""
    if len(feature_shape) == 1:
        return Sequential([Dense(feature_shape[0], n_classes, rng), *_bn(arch, n_classes, n_sets)])
    c = feature_shape[0]
    return Sequential([Conv2d(c, c, 3, rng), *_bn(arch, c, n_sets), LeakyReLU(arch.leaky_slope),
                       GlobalAvgPool(), Dense(c, n_classes, rng), *_bn(arch, n_classes, n_sets)])


def build_discriminator(arch: ArchConfig, feature_shape: Tuple[int, ...], rng: np.random.Generator) -> Sequential:
    """Two-layer domain discriminator d on flattened features (outputs a logit)."""
    flat = int(np.prod(feature_shape))
    return Sequential([Flatten(), Dense(flat, arch.disc_hidden, rng), ReLU(), Dense(arch.disc_hidden, 1, rng)])


class Hypothesis:
    """One f_i = h_i ∘ g_i together with its domain discriminator d_i."""

    def __init__(self, index: int, generator: Sequential, head: Sequential, discriminator: Sequential,
                 rng: np.random.Generator):
        self.index = index
        self.generator = generator
        self.head = head
        self.discriminator = discriminator
        self.rng = rng

    def context(self, stochastic: bool = True, update_stats: bool = False) -> ForwardContext:
        return ForwardContext(self.index, self.rng, stochastic, update_stats)

    def features(self, x: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
        return self.generator(ad.as_tensor(x), ctx or self.context())

    def logits_from_features(self, feats: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
        return self.head(feats, ctx or self.context())

    def probs(self, x: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
        ctx = ctx or self.context()
        return ad.softmax(self.logits_from_features(self.features(x, ctx), ctx))

    def discriminate(self, feats: Tensor) -> Tensor:
        """Probability that each feature row comes from the source domain, clamped to [eps, 1-eps]."""
        logit = self.discriminator(feats, self.context())
        return ad.clamp(ad.sigmoid(ad.reshape(logit, (-1,))), ad.CLAMP_EPS, 1.0 - ad.CLAMP_EPS)

    def classifier_parameters(self) -> Dict[str, Tensor]:
        params = dict(self.generator.named_parameters("g."))
        params.update(self.head.named_parameters("h."))
        return params

    def discriminator_parameters(self) -> Dict[str, Tensor]:
        return dict(self.discriminator.named_parameters("d."))

    def named_buffers(self) -> Dict[str, np.ndarray]:
        bufs = dict(self.generator.named_buffers("g."))
        bufs.update(self.head.named_buffers("h."))
        return bufs

    def layers(self) -> List[Tuple[str, Sequential]]:
        return [("g", self.generator), ("h", self.head), ("d", self.discriminator)]

    @property
    def training(self) -> bool:
        return self.generator.training

    def train(self, mode: bool = True) -> "Hypothesis":
        for _, net in self.layers():
            net.train(mode)
        return self

    def eval(self) -> "Hypothesis":
        return self.train(False)

    def predict_proba(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Class probabilities in the current mode, without recording gradients."""
        chunks = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                ctx = self.context(stochastic=False, update_stats=False)
                chunks.append(self.probs(Tensor(x[start:start + batch_size]), ctx).data)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 0))

    def extract_features(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        chunks = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                ctx = self.context(stochastic=False, update_stats=False)
                chunks.append(ad.flatten(self.features(Tensor(x[start:start + batch_size]), ctx)).data)
        return np.concatenate(chunks, axis=0)

    def clone(self, values: Optional[Mapping[int, np.ndarray]] = None) -> "Hypothesis":
        """Independent deep copy; ``values`` maps id(original param) -> replacement data."""
        memo: Dict[int, object] = {}
        twin = copy.deepcopy(self, memo)
        for key, value in (values or {}).items():
            if key in memo:
                memo[key].data = np.array(value, copy=True)
        return twin


class HypothesisPair:
    """Two (or, for single-model baselines, one) hypotheses with a parameter-sharing mode."""

    def __init__(self, members: Sequence[Hypothesis], sharing: SharingMode):
        self.members = list(members)
        self.sharing = sharing

    def __len__(self) -> int:
        return len(self.members)

    @property
    def shares_batchnorm(self) -> bool:
        """Both members run through one set of batch-norm statistics."""
        return (len(self.members) == 2 and self.sharing == SharingMode.SHARED_STOCHASTIC
                and self.members[0].generator is self.members[1].generator)

    def train(self, mode: bool = True) -> "HypothesisPair":
        for m in self.members:
            m.train(mode)
        return self

    def eval(self) -> "HypothesisPair":
        return self.train(False)

    def _collect(self, getter) -> Dict[str, Tensor]:
        seen = set()
        out = {}
        for m in self.members:
            for name, p in getter(m).items():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                out[f"f{m.index}.{name}"] = p
        return out

    def classifier_parameters(self) -> Dict[str, Tensor]:
        return self._collect(Hypothesis.classifier_parameters)

    def discriminator_parameters(self) -> Dict[str, Tensor]:
        return self._collect(Hypothesis.discriminator_parameters)

    def parameters(self) -> Dict[str, Tensor]:
        return {**self.classifier_parameters(), **self.discriminator_parameters()}

    def named_buffers(self) -> Dict[str, np.ndarray]:
        seen = set()
        out = {}
        for m in self.members:
            for prefix, net in m.layers():
                for lname, layer in _walk(net, f"f{m.index}.{prefix}."):
                    if id(layer) in seen or not layer.buffers():
                        continue
                    seen.add(id(layer))
                    for bname, value in layer.buffers().items():
                        out[f"{lname}{bname}"] = value
        return out

    def load_buffers(self, values: Mapping[str, np.ndarray]) -> None:
        seen = set()
        for m in self.members:
            for prefix, net in m.layers():
                for lname, layer in _walk(net, f"f{m.index}.{prefix}."):
                    if id(layer) in seen or not layer.buffers():
                        continue
                    seen.add(id(layer))
                    for bname in layer.buffers():
                        layer.load_buffer(bname, values[f"{lname}{bname}"])


def _walk(net, prefix: str) -> Iterator[Tuple[str, object]]:
    yield prefix, net
    for name, child in net.children():
        yield from _walk(child, f"{prefix}{name}.")


def hypothesis_seeds(seed: int, same_init: bool) -> Tuple[int, int]:
    base = 1000 * seed
    return (base + 1, base + 1) if same_init else (base + 1, base + 2)


def build_pair(arch: ArchConfig, input_shape: Tuple[int, ...], n_classes: int, sharing: SharingMode,
               seed: int = 0, members: int = 2, same_init: bool = False) -> HypothesisPair:
    """Assemble the hypotheses for a sharing mode; discriminators are never shared."""
    seeds = hypothesis_seeds(seed, same_init)[:members]
    init_rngs = [np.random.default_rng([s, 0]) for s in seeds]
    noise_rngs = [np.random.default_rng([s, 1]) for s in seeds]

    hyps = []
    if sharing == SharingMode.INDEPENDENT or members == 1:
        for i, (init, noise) in enumerate(zip(init_rngs, noise_rngs), start=1):
            g, fshape = build_generator(arch, input_shape, 1, init)
            h = build_head(arch, fshape, n_classes, 1, init)
            d = build_discriminator(arch, fshape, init)
            hyps.append(Hypothesis(i, g, h, d, noise))
    else:
        n_sets = 2 if sharing == SharingMode.SHARED_BN else 1
        g, fshape = build_generator(arch, input_shape, n_sets, init_rngs[0])
        h = build_head(arch, fshape, n_classes, n_sets, init_rngs[0])
        for i, (init, noise) in enumerate(zip(init_rngs, noise_rngs), start=1):
            d = build_discriminator(arch, fshape, init)
            hyps.append(Hypothesis(i, g, h, d, noise))
    pair = HypothesisPair(hyps, sharing)
    n_params = sum(p.data.size for p in pair.parameters().values())
    logger.info(f"Built {len(hyps)} hypothesis model(s), sharing={sharing.value}, {n_params} parameters")
    return pair
