"""The five small networks of the pipeline, built on :mod:`g2d.diffkernel`."""

from __future__ import annotations

import hashlib

import numpy as np

from .diffkernel import Graph, Node, Parameter


class Module:
    """Ordered collection of named parameters."""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Parameter] = {}

    def add_param(self, name: str, value) -> Parameter:
        p = Parameter(f"{self.name}.{name}", value)
        self.params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.trainable = False

    @property
    def frozen(self) -> bool:
        return all(not p.trainable for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params.values()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params.values():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"{p.name}: stored shape {value.shape} != {p.value.shape}")
            p.value[...] = value

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw parameter bytes."""
        h = hashlib.sha256()
        for p in self.params.values():
            h.update(p.name.encode())
            h.update(np.asarray(p.value.shape, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class _ConvStack(Module):
    def conv(self, name, rng, c_in, c_out, k=3):
        self.add_param(f"{name}.w", _he(rng, (c_out, c_in, k, k), c_in * k * k))
        self.add_param(f"{name}.b", np.zeros(c_out))

    def dense(self, name, rng, d_in, d_out, gain=2.0):
        self.add_param(f"{name}.w", rng.normal(0.0, np.sqrt(gain / d_in), size=(d_in, d_out)))
        self.add_param(f"{name}.b", np.zeros(d_out))

    def _c(self, g, x, name, stride=1, pad=1):
        return g.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, pad)

    def _l(self, g, x, name):
        return g.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])


class TeacherRecognizer(_ConvStack):
    """Conv classifier on unmasked faces; ``features`` is the penultimate layer."""

    def __init__(self, n_classes: int, feat_dim: int = 64, width: int = 16,
                 image_size: int = 32, seed: int = 0):
        super().__init__("teacher")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.config = dict(n_classes=n_classes, feat_dim=feat_dim, width=width, image_size=image_size)
        self.conv("c1", rng, 3, width)
        self.conv("c2", rng, width, 2 * width)
        self.conv("c3", rng, 2 * width, 2 * width)
        spatial = image_size // 8
        self.dense("feat", rng, 2 * width * spatial * spatial, feat_dim)
        self.dense("cls", rng, feat_dim, n_classes, gain=1.0)

    def features(self, g: Graph, x) -> Node:
        h = g.relu(self._c(g, x, "c1", stride=2))
        h = g.relu(self._c(g, h, "c2", stride=2))
        h = g.relu(self._c(g, h, "c3", stride=2))
        return self._l(g, g.flatten(h), "feat")

    def logits(self, g: Graph, x) -> Node:
        return self._l(g, g.relu(self.features(g, x)), "cls")


class GenerativeEncoder(_ConvStack):
    """(image, mask) -> descriptor grid of shape grid_channels x H/4 x W/4."""

    def __init__(self, grid_channels: int = 32, width: int = 16, seed: int = 0):
        super().__init__("encoder")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.config = dict(grid_channels=grid_channels, width=width)
        self.conv("c1", rng, 4, width)
        self.conv("c2", rng, width, grid_channels)
        self.conv("c3", rng, grid_channels, grid_channels)

    @staticmethod
    def fuse(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Concatenate the mask as a fourth input channel."""
        return np.concatenate([image, mask[:, None]], axis=1)

    def forward(self, g: Graph, image, mask) -> Node:
        x = g.input(self.fuse(image, mask))
        h = g.relu(self._c(g, x, "c1", stride=2))
        h = g.relu(self._c(g, h, "c2", stride=2))
        return g.relu(self._c(g, h, "c3"))


class InpaintingDecoder(_ConvStack):
    """Descriptor grid -> 3 x H x W image in (0, 1)."""

    def __init__(self, grid_channels: int = 32, width: int = 16, seed: int = 0):
        super().__init__("decoder")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        self.config = dict(grid_channels=grid_channels, width=width)
        self.conv("c1", rng, grid_channels, width)
        self.conv("c2", rng, width, width // 2)
        self.conv("out", rng, width // 2, 3)

    def forward(self, g: Graph, grid) -> Node:
        h = g.relu(self._c(g, g.upsample2x(grid), "c1"))
        h = g.relu(self._c(g, g.upsample2x(h), "c2"))
        return g.sigmoid(self._c(g, h, "out"))


class Critic(_ConvStack):
    """Three stride-2 convolutions and a scalar head."""

    def __init__(self, width: int = 8, image_size: int = 32, seed: int = 0):
        super().__init__("critic")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
        self.config = dict(width=width, image_size=image_size)
        self.conv("c1", rng, 3, width)
        self.conv("c2", rng, width, 2 * width)
        self.conv("c3", rng, 2 * width, 2 * width)
        spatial = image_size // 8
        self.dense("head", rng, 2 * width * spatial * spatial, 1, gain=1.0)
        self._layers = ("c1", "c2", "c3")

    def forward(self, g: Graph, x) -> Node:
        h = x
        for name in self._layers:
            h = g.relu(self._c(g, h, name, stride=2))
        return self._l(g, g.flatten(h), "head")

    def input_gradient(self, x: np.ndarray) -> np.ndarray:
        """d(sum of scores)/dx for a batch, without touching parameter gradients."""
        g = Graph()
        xn = g.input(x, requires_grad=True)
        g.backward(g.sum(self.forward(g, xn)), accumulate=False)
        return g.grad(xn)

    def directional(self, g: Graph, x: np.ndarray, v: np.ndarray) -> Node:
        """Per-sample derivative of the critic at ``x`` along ``v``, as a graph in the weights.

        Activation patterns are taken from a forward pass at ``x`` and held
        constant; biases drop out of the directional derivative.
        """
        tape = Graph()
        h = tape.input(x)
        masks = []
        for name in self._layers:
            pre = self._c(tape, h, name, stride=2)
            masks.append(pre.value > 0)
            h = tape.relu(pre)
        t = g.input(v)
        for name, m in zip(self._layers, masks):
            t = g.mul_const(g.conv2d(t, self.params[f"{name}.w"], None, 2, 1), m)
        return g.linear(g.flatten(t), self.params["head.w"])


class DiscriminativeReformer(_ConvStack):
    """Descriptor grid -> embedding: conv, residual blocks, mean pool, linear."""

    def __init__(self, grid_channels: int = 32, width: int = 32, n_blocks: int = 2,
                 embed_dim: int = 64, seed: int = 0):
        super().__init__("reformer")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
        self.config = dict(grid_channels=grid_channels, width=width, n_blocks=n_blocks,
                           embed_dim=embed_dim)
        self.n_blocks = n_blocks
        self.conv("c0", rng, grid_channels, width)
        for b in range(n_blocks):
            self.conv(f"r{b}a", rng, width, width)
            self.conv(f"r{b}b", rng, width, width)
            # damp the residual branch at initialisation
            self.params[f"r{b}b.w"].value *= 0.5
        self.dense("head", rng, width, embed_dim, gain=1.0)

    def forward(self, g: Graph, grid) -> Node:
        h = g.relu(self._c(g, grid, "c0", stride=2))
        for b in range(self.n_blocks):
            r = g.relu(self._c(g, h, f"r{b}a"))
            r = self._c(g, r, f"r{b}b")
            h = g.relu(g.residual_add(h, r))
        return self._l(g, g.mean_pool(h), "head")


class LinearMap(_ConvStack):
    """A single fully connected layer (the distillation projection, the classifier)."""

    def __init__(self, name: str, d_in: int, d_out: int, seed: int = 0, salt: int = 6):
        super().__init__(name)
        rng = np.random.default_rng(np.random.SeedSequence([seed, salt]))
        self.config = dict(d_in=d_in, d_out=d_out)
        self.dense("fc", rng, d_in, d_out, gain=1.0)

    @property
    def weight(self) -> Parameter:
        return self.params["fc.w"]

    @property
    def bias(self) -> Parameter:
        return self.params["fc.b"]

    def forward(self, g: Graph, x) -> Node:
        return self._l(g, x, "fc")


class FeatureClassifier(LinearMap):
    def __init__(self, embed_dim: int, n_classes: int, seed: int = 0):
        super().__init__("classifier", embed_dim, n_classes, seed, salt=7)

    def probabilities(self, embeddings: np.ndarray) -> np.ndarray:
        from .diffkernel import softmax
        return softmax(self.forward(Graph(), embeddings).value)
