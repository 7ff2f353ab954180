from .autograd import Tensor, no_grad
from .checkpoint import load_networks, read_checkpoint, save_networks, write_checkpoint
from .nets import Discriminator, Generator, parameter_hash, seed_all
from .optim import Adam

__all__ = [
    "Adam", "Discriminator", "Generator", "Tensor", "load_networks", "no_grad",
    "parameter_hash", "read_checkpoint", "save_networks", "seed_all", "write_checkpoint",
]
