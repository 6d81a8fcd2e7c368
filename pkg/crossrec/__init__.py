from crossrec.interactions import Interactions, chronological_split
from crossrec.model import CrossDomainModel, Hyperparams

__version__ = "0.1.0"

__all__ = ["Interactions", "chronological_split", "CrossDomainModel", "Hyperparams", "__version__"]
