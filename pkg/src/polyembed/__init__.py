"""polyembed: multilingual sentence embeddings at desk scale.

Adapter-routed transformer encoder trained with an in-batch contrastive
objective on title/body pairs, evaluated on cross-lingual document
retrieval and nearest-neighbor topic classification.
"""

__version__ = "0.1.0"
