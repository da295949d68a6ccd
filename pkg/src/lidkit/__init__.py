"""Language identification toolkit.

Multi-task text classifier (in-domain detection + fine-grained language ID)
over a hashed character n-gram encoder, trained with a two-level
margin-based contrastive objective, plus the data generation, augmentation
and embedding-evaluation machinery around it.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402,F401
    Example,
    Hyperparams,
    LabelSpace,
    MarginTable,
    derive_in_domain,
    make_example,
    margin_of,
)
