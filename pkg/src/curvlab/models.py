"""Classifiers: the bias-free two-layer scalar net with its closed-form input
Hessian, and a small MLP / CNN used for adversarial training runs."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from curvlab import activations as act
from curvlab import tensor_core as tc
from curvlab.activations import ActivationSpec, parse_activation
from curvlab.errors import BadHeader, NonSmoothActivation, ShapeMismatch, SpecMismatch, TruncatedFile

CKPT_HEADER = "CURVLAB-CKPT v1"


# ---------------------------------------------------------------------------
# two-layer analytic classifier
# ---------------------------------------------------------------------------


@dataclass
class TwoLayerNet:
    """f(x) = w2 . act(w1 x); x is in class 1 iff f(x) < 0."""

    w1: np.ndarray  # (hidden, input)
    w2: np.ndarray  # (hidden,)
    activation: ActivationSpec

    def __post_init__(self):
        self.w1 = np.atleast_2d(np.asarray(self.w1, dtype=np.float64))
        self.w2 = np.asarray(self.w2, dtype=np.float64).reshape(-1)
        if self.w1.shape[0] != self.w2.shape[0]:
            raise ShapeMismatch(f"w1 has {self.w1.shape[0]} rows but w2 has {self.w2.shape[0]} entries")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    def __call__(self, x):
        """Tensor-valued evaluation, differentiable through tensor_core."""
        z = tc.matmul(self.w1, x)
        return tc.dot(self.w2, tc.activation(z, self.activation))

    def batched(self, xs):
        """(n, d) -> (n,) evaluation for the brute-force perturbation search."""
        z = tc.matmul(xs, self.w1.T)
        return tc.matmul(tc.activation(z, self.activation), self.w2)


def two_layer_forward(net: TwoLayerNet, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ShapeMismatch(f"expected input of shape ({net.input_dim},), got {x.shape}")
    return float(net.w2 @ act.value(net.activation, net.w1 @ x))


def two_layer_input_hessian(net: TwoLayerNet, x) -> np.ndarray:
    """w1^T diag(act''(w1 x) * w2) w1, exactly symmetric."""
    if not net.activation.smooth:
        raise NonSmoothActivation(f"{net.activation} has no second derivative")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ShapeMismatch(f"expected input of shape ({net.input_dim},), got {x.shape}")
    scale = act.d2(net.activation, net.w1 @ x) * net.w2
    h = net.w1.T @ (scale[:, None] * net.w1)
    return 0.5 * (h + h.T)


def two_layer_input_gradient(net: TwoLayerNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return net.w1.T @ (act.d1(net.activation, net.w1 @ x) * net.w2)


# ---------------------------------------------------------------------------
# trainable MLP / CNN
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    """Optional conv stem (valid padding) followed by dense layers.

    Each conv layer uses a ``conv_kernel`` square kernel and ``conv_stride``.
    The final dense layer maps to ``num_classes`` logits.
    """

    input_shape: tuple
    hidden: tuple = (256, 256)
    num_classes: int = 2
    activation: ActivationSpec = field(default_factory=lambda: ActivationSpec("silu"))
    conv_channels: tuple = ()
    conv_kernel: int = 3
    conv_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(n) for n in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(n) for n in self.conv_channels))
        object.__setattr__(self, "activation", parse_activation(self.activation))
        if self.conv_channels and len(self.input_shape) != 3:
            raise ShapeMismatch("a conv stem needs (C, H, W) inputs")

    def layer_shapes(self) -> list[tuple[str, tuple, tuple]]:
        """(kind, weight shape, bias shape) per layer."""
        shapes = []
        if self.conv_channels:
            c, h, w = self.input_shape
            for o in self.conv_channels:
                shapes.append(("conv", (o, c, self.conv_kernel, self.conv_kernel), (o,)))
                h = (h - self.conv_kernel) // self.conv_stride + 1
                w = (w - self.conv_kernel) // self.conv_stride + 1
                if h < 1 or w < 1:
                    raise ShapeMismatch(f"conv stem shrinks {self.input_shape} to nothing")
                c = o
            width = c * h * w
        else:
            width = int(np.prod(self.input_shape))
        for n in self.hidden + (self.num_classes,):
            shapes.append(("dense", (n, width), (n,)))
            width = n
        return shapes

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(w)) + int(np.prod(b)) for _, w, b in self.layer_shapes())

    def fan_ins(self) -> list[int]:
        return [int(np.prod(w[1:])) for _, w, _ in self.layer_shapes()]

    def with_activation(self, spec) -> "Architecture":
        return Architecture(
            self.input_shape, self.hidden, self.num_classes, parse_activation(spec),
            self.conv_channels, self.conv_kernel, self.conv_stride,
        )


def _split(arch: Architecture, flat):
    """Slice a flat parameter array into per-layer (weight, bias) views."""
    out, i = [], 0
    for _, ws, bs in arch.layer_shapes():
        nw, nb = int(np.prod(ws)), int(np.prod(bs))
        out.append((flat[i:i + nw].reshape(ws), flat[i + nw:i + nw + nb].reshape(bs)))
        i += nw + nb
    return out


def network(arch: Architecture, layers, x):
    """Build the logits graph.  ``layers`` holds (weight, bias) arrays or Tensors."""
    x = tc.as_tensor(x)
    expected = (x.shape[0],) + arch.input_shape if x.ndim == len(arch.input_shape) + 1 else None
    if expected is None or x.shape != expected:
        raise ShapeMismatch(f"input batch shape {x.shape} does not match input shape {arch.input_shape}")
    kinds = [k for k, _, _ in arch.layer_shapes()]
    h = x
    last = len(layers) - 1
    for i, ((w, b), kind) in enumerate(zip(layers, kinds)):
        if kind == "conv":
            h = tc.conv2d(h, w, tc.as_tensor(b), stride=arch.conv_stride)
        else:
            if h.ndim != 2:
                h = tc.reshape(h, (h.shape[0], -1))
            h = tc.add(tc.matmul(h, tc.transpose(w)), b)
        if i != last:
            h = tc.activation(h, arch.activation)
    return h


@dataclass
class ModelState:
    arch: Architecture
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.size != self.arch.param_count:
            raise ShapeMismatch(f"{self.params.size} parameters given, architecture needs {self.arch.param_count}")

    @property
    def param_count(self) -> int:
        return self.params.size

    def layers(self):
        return _split(self.arch, self.params)

    def copy(self) -> "ModelState":
        return ModelState(self.arch, self.params.copy())

    def __eq__(self, other):
        return (
            isinstance(other, ModelState)
            and self.arch == other.arch
            and np.array_equal(self.params, other.params)
        )

    # -- evaluation helpers used by attacks / trainer / curvature_lab --------
    def logits(self, x) -> np.ndarray:
        with tc.no_grad():
            return network(self.arch, self.layers(), x).data

    def losses(self, x, y) -> np.ndarray:
        with tc.no_grad():
            return tc.cross_entropy(network(self.arch, self.layers(), x), y, reduction="none").data

    def loss_and_input_grad(self, x, y):
        """Per-sample cross-entropy and its gradient with respect to each input."""
        xv = tc.variable(x)
        losses = tc.cross_entropy(network(self.arch, self.layers(), xv), y, reduction="none")
        g = tc.grad(tc.sum(losses), xv)
        return losses.data, g.data

    def loss_and_param_grad(self, x, y):
        """Mean cross-entropy and its gradient as a flat vector."""
        tensors = [(tc.variable(w), tc.variable(b)) for w, b in self.layers()]
        logits = network(self.arch, tensors, x)
        loss = tc.cross_entropy(logits, y)
        leaves = [t for pair in tensors for t in pair]
        grads = tc.grad(loss, leaves)
        return float(loss.data), np.concatenate([g.data.reshape(-1) for g in grads]), logits.data

    def scalar_fn(self, label: int, selector: str = "logit"):
        """Scalar function of one input: the label's logit, or the loss."""
        layers = self.layers()
        arch = self.arch

        def fn(x):
            logits = network(arch, layers, tc.reshape(x, (1,) + arch.input_shape))
            if selector == "logit":
                return tc.sum(tc.pick(logits, [label]))
            if selector == "loss":
                return tc.sum(tc.cross_entropy(logits, [label], reduction="none"))
            raise ValueError(f"unknown selector {selector!r}")

        return fn


def mlp_forward(state: ModelState, x_batch) -> np.ndarray:
    return state.logits(x_batch)


def init_weights(arch: Architecture, seed: int) -> ModelState:
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for (_, ws, bs), fan_in in zip(arch.layer_shapes(), arch.fan_ins()):
        bound = math.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(ws))))
        chunks.append(np.zeros(int(np.prod(bs))))
    return ModelState(arch, np.concatenate(chunks))


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def _manifest(arch: Architecture) -> list[str]:
    lines = [
        f"activation {arch.activation}",
        "input_shape " + "x".join(map(str, arch.input_shape)),
        "hidden " + ",".join(map(str, arch.hidden)),
        f"num_classes {arch.num_classes}",
        "conv_channels " + ",".join(map(str, arch.conv_channels)),
        f"conv_kernel {arch.conv_kernel}",
        f"conv_stride {arch.conv_stride}",
    ]
    for i, (kind, ws, bs) in enumerate(arch.layer_shapes()):
        lines.append(f"layer {i} {kind} " + "x".join(map(str, ws)) + " " + "x".join(map(str, bs)))
    lines.append(f"params {arch.param_count}")
    return lines


def checkpoint_bytes(state: ModelState) -> bytes:
    text = "\n".join([CKPT_HEADER, *_manifest(state.arch), "end"]) + "\n"
    return text.encode("ascii") + state.params.astype("<f4").tobytes()


def _ints(text: str, sep: str) -> tuple:
    return tuple(int(t) for t in text.split(sep) if t)


def read_checkpoint(data: bytes, expected: Architecture | None = None) -> ModelState:
    buf = io.BytesIO(data)
    if buf.readline().decode("ascii", "replace").rstrip("\n") != CKPT_HEADER:
        raise BadHeader(f"missing {CKPT_HEADER!r} header")
    fields, layers = {}, []
    while True:
        raw = buf.readline()
        if not raw:
            raise BadHeader("manifest is not terminated by 'end'")
        line = raw.decode("ascii", "replace").rstrip("\n")
        if line == "end":
            break
        key, _, rest = line.partition(" ")
        if key == "layer":
            layers.append(rest)
        else:
            fields[key] = rest
    try:
        arch = Architecture(
            input_shape=_ints(fields["input_shape"], "x"),
            hidden=_ints(fields["hidden"], ","),
            num_classes=int(fields["num_classes"]),
            activation=parse_activation(fields["activation"]),
            conv_channels=_ints(fields["conv_channels"], ","),
            conv_kernel=int(fields["conv_kernel"]),
            conv_stride=int(fields["conv_stride"]),
        )
        count = int(fields["params"])
    except (KeyError, ValueError) as exc:
        raise BadHeader(f"malformed manifest: {exc}") from None
    recorded = [" ".join(line.split(" ")[1:]) for line in layers]
    actual = [f"{k} " + "x".join(map(str, w)) + " " + "x".join(map(str, b)) for k, w, b in arch.layer_shapes()]
    if recorded != actual or count != arch.param_count:
        raise ShapeMismatch("layer shapes in the manifest disagree with the architecture")
    payload = buf.read()
    if len(payload) < 4 * count:
        raise TruncatedFile(f"expected {4 * count} parameter bytes, found {len(payload)}")
    if len(payload) > 4 * count:
        raise BadHeader("trailing bytes after the parameter block")
    if expected is not None:
        if expected.activation != arch.activation:
            raise SpecMismatch(f"checkpoint activation {arch.activation} != expected {expected.activation}")
        if expected != arch:
            raise ShapeMismatch("checkpoint architecture differs from the expected one")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return ModelState(arch, params)


def save_checkpoint(path, state: ModelState) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state))
    return path


def load_checkpoint(path, expected: Architecture | None = None) -> ModelState:
    return read_checkpoint(Path(path).read_bytes(), expected)
