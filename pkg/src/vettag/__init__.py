"""vettag: multi-label SNOMED-CT coding of veterinary clinical notes.

A bidirectional-LSTM tagger with hierarchical label regularization (cluster
penalty and meta-label loss), confidence-based and learned abstention, the
evaluation suite behind the reported metrics, a synthetic corpus generator
with a domain-shift knob, and an HTTP review service for deferred documents.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    abstention,
    corpus,
    evaluation,
    model,
    numerics,
    objectives,
    taxonomy,
    text,
    training,
)
