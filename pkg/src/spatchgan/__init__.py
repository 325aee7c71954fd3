"""Statistical-feature GAN discriminator and weak-cycle unpaired image translation."""

from .discriminator import DiscriminatorConfig, build_discriminator, build_patchgan_baseline
from .generators import BackwardGenerator, ForwardGenerator, GeneratorConfig
from .losses import LossWeights

__version__ = "0.1.0"

__all__ = [
    "BackwardGenerator", "DiscriminatorConfig", "ForwardGenerator", "GeneratorConfig",
    "LossWeights", "build_discriminator", "build_patchgan_baseline", "__version__",
]
