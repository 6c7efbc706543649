"""refgrounder: a configurable one-stage referring-expression grounding
toolkit.  Given an image and a natural-language expression, the model
predicts the referent's bounding box; every architectural and training
choice is a config switch so design axes can be ablated head to head."""

__version__ = "0.1.0"

from .boxes import BoundingBox
from .config import RunConfig, load_config, load_preset, validate
from .data import RefSample, Vocabulary, load_manifest, tokenize
from .model import GroundingModel

__all__ = [
    "BoundingBox",
    "GroundingModel",
    "RefSample",
    "RunConfig",
    "Vocabulary",
    "__version__",
    "load_config",
    "load_manifest",
    "load_preset",
    "tokenize",
    "validate",
]
