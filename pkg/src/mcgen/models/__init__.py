"""Model registry: CLI names -> (class, conditioning)."""
from .base import ConditionalModel, sample
from .classifier import EvalClassifier
from .gan import McGan, gan_losses, hinge_d_loss, hinge_g_loss
from .glow import McCoupling, McGlow, coupling_forward, coupling_inverse
from .pixelcnn import McGatedBlock, McPixelCNN, gated_forward
from .vae import McMlpVae, McVae, bce, gaussian_kl

MODELS = {
    "mcvae": (McVae, "mc"),
    "cvae": (McVae, "embed"),
    "vae": (McVae, "none"),
    "mcgan": (McGan, "mc"),
    "cgan": (McGan, "embed"),
    "gan": (McGan, "none"),
    "mcpixelcnn": (McPixelCNN, "mc"),
    "mcglow": (McGlow, "mc"),
    "mcmlpvae": (McMlpVae, "mc"),
    "classifier": (EvalClassifier, "none"),
}

CLASSES = {cls.__name__: cls for cls, _ in MODELS.values()}


def build_model(model_id, num_modes, **kwargs):
    try:
        cls, conditioning = MODELS[model_id]
    except KeyError:
        raise ValueError(f"unknown model {model_id!r}; choose from {sorted(MODELS)}") from None
    kwargs.setdefault("conditioning", conditioning)
    return cls(num_modes, **kwargs)


__all__ = [
    "MODELS",
    "CLASSES",
    "build_model",
    "sample",
    "ConditionalModel",
    "EvalClassifier",
    "McVae",
    "McMlpVae",
    "McGan",
    "McPixelCNN",
    "McGlow",
    "McGatedBlock",
    "McCoupling",
    "gan_losses",
    "hinge_d_loss",
    "hinge_g_loss",
    "gated_forward",
    "coupling_forward",
    "coupling_inverse",
    "bce",
    "gaussian_kl",
]
