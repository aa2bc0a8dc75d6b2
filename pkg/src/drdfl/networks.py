"""The five dense networks that make up one client.

PersonaNet (private encoder), Learngene (shared encoder producing a Gaussian
posterior), decoder, classifier and the private adversarial classifier that
watches the Learngene code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_VAR_BOUNDS, ShapeError, Tensor
from .seeds import derive_seed


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(int(w) <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")


class Mlp:
    """Dense layers with tanh between them and a linear output."""

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        widths = spec.layer_widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
            self.biases.append(Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True))

    @property
    def in_width(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.spec.layer_widths[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def __call__(self, x, frozen: bool = False) -> Tensor:
        """Forward pass. With ``frozen`` no gradient reaches this network's
        parameters; it still flows back to ``x``."""
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_width:
            raise ShapeError("mlp", x.shape, (-1, self.in_width))
        return ad.mlp(x, self.weights, self.biases, frozen=frozen)

    def flat(self) -> np.ndarray:
        """Parameters in canonical order (W0, b0, W1, b1, ...), row-major."""
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def load_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.num_parameters():
            raise ShapeError("load_flat", (values.size,), (self.num_parameters(),))
        offset = 0
        for p in self.parameters():
            n = p.size
            p.data = values[offset:offset + n].reshape(p.shape).copy()
            offset += n

    def zero_(self) -> None:
        for p in self.parameters():
            p.data = np.zeros_like(p.data)


@dataclass(frozen=True)
class ModelDims:
    D: int = 8
    d_p: int = 4
    d_l: int = 4
    K: int = 4
    hidden: int = 32
    n_hidden: int = 2

    def bundle(self, seed: int = 0) -> "SpecBundle":
        h = (self.hidden,) * self.n_hidden
        return SpecBundle(
            persona=MlpSpec((self.D, *h, self.d_p), seed=seed),
            learngene=MlpSpec((self.D, *h, 2 * self.d_l), seed=seed),
            decoder=MlpSpec((self.d_p + self.d_l, *h, self.D), seed=seed),
            classifier=MlpSpec((self.D, *h, self.K), seed=seed),
            adversary=MlpSpec((self.d_l, *h, self.K), seed=seed),
        )


@dataclass(frozen=True)
class SpecBundle:
    persona: MlpSpec
    learngene: MlpSpec
    decoder: MlpSpec
    classifier: MlpSpec
    adversary: MlpSpec

    def dims(self) -> ModelDims:
        """Infer (and cross-check) the latent and data widths."""
        D = self.persona.layer_widths[0]
        d_p = self.persona.layer_widths[-1]
        lg_out = self.learngene.layer_widths[-1]
        K = self.classifier.layer_widths[-1]
        problems = []
        if lg_out % 2:
            problems.append(f"learngene output {lg_out} must hold mean and log-variance")
        d_l = lg_out // 2
        if self.learngene.layer_widths[0] != D:
            problems.append("learngene input width != persona input width")
        if self.decoder.layer_widths[0] != d_p + d_l:
            problems.append(f"decoder input {self.decoder.layer_widths[0]} != d_p + d_l = {d_p + d_l}")
        if self.decoder.layer_widths[-1] != D:
            problems.append("decoder output width != D")
        if self.classifier.layer_widths[0] != D:
            problems.append("classifier input width != D")
        if self.adversary.layer_widths[0] != d_l:
            problems.append("adversary input width != d_l")
        if self.adversary.layer_widths[-1] != K:
            problems.append("adversary output width != K")
        if problems:
            raise ValueError("incoherent network widths: " + "; ".join(problems))
        hidden = self.persona.layer_widths[1] if len(self.persona.layer_widths) > 2 else 0
        return ModelDims(D, d_p, d_l, K, hidden, len(self.persona.layer_widths) - 2)


@dataclass
class ClientModel:
    persona_net: Mlp
    learngene: Mlp
    decoder: Mlp
    classifier: Mlp
    adversary: Mlp
    client_id: int
    dims: ModelDims
    logvar_bounds: tuple[float, float] = field(default=LOG_VAR_BOUNDS)

    def encode_persona(self, x) -> Tensor:
        return self.persona_net(x)

    def encode_learngene(self, x, rng: np.random.Generator | int | None = None):
        """Return ``(mu, logvar, z_l)``; ``z_l`` is sampled when an rng or seed
        is given and equals ``mu`` otherwise (evaluation)."""
        out = self.learngene(x)
        d = self.dims.d_l
        mu = ad.slice_last(out, 0, d)
        logvar = ad.clamp(ad.slice_last(out, d, 2 * d), *self.logvar_bounds)
        if rng is None:
            return mu, logvar, mu
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        return mu, logvar, ad.gaussian_sample(mu, logvar, rng=rng)

    def decode(self, z_p, z_l) -> Tensor:
        z_p, z_l = ad.as_tensor(z_p), ad.as_tensor(z_l)
        if z_p.data.ndim != 2 or z_l.data.ndim != 2 or z_p.shape[0] != z_l.shape[0] \
                or z_p.shape[1] != self.dims.d_p or z_l.shape[1] != self.dims.d_l:
            raise ShapeError("decode", z_p.shape, z_l.shape)
        return self.decoder(ad.concat([z_p, z_l], axis=-1))

    def classify(self, x) -> Tensor:
        return self.classifier(x)

    def adversary_logits(self, z_l, frozen: bool = False) -> Tensor:
        return self.adversary(z_l, frozen=frozen)

    def nets(self) -> dict[str, Mlp]:
        return {
            "persona": self.persona_net,
            "learngene": self.learngene,
            "decoder": self.decoder,
            "classifier": self.classifier,
            "adversary": self.adversary,
        }

    def parameters(self) -> list[Tensor]:
        return [p for net in self.nets().values() for p in net.parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: net.flat() for name, net in self.nets().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, net in self.nets().items():
            net.load_flat(np.asarray(state[name]))


def init_client(bundle: SpecBundle, client_id: int, shared_learngene_seed: int) -> ClientModel:
    """Build a client: the Learngene comes from the shared seed so every
    client starts from identical shared weights; every other network gets a
    seed derived from its own spec seed and the client id."""
    dims = bundle.dims()

    def private(spec: MlpSpec, net_index: int) -> Mlp:
        return Mlp(replace(spec, seed=derive_seed(spec.seed, "init", client_id, net_index)))

    return ClientModel(
        persona_net=private(bundle.persona, 0),
        learngene=Mlp(replace(bundle.learngene, seed=shared_learngene_seed)),
        decoder=private(bundle.decoder, 2),
        classifier=private(bundle.classifier, 3),
        adversary=private(bundle.adversary, 4),
        client_id=client_id,
        dims=dims,
    )
