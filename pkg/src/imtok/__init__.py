"""imtok: adaptive entropy-guided image tokenization at desk scale.

Submodules
----------
imagegrid   PPM/PGM rasters, overlapping patch partitioning, reassembly.
infotheory  Entropy, mutual-information, redundancy, and rate-distortion math.
selection   Entropy-ranked greedy token selection with a dual threshold.
nanonet     Miniature deterministic attention encoder/decoder (pure numpy).
quantizer   Dual vector-quantization codebooks with projection heads.
pipeline    Tokenize/de-tokenize orchestration, losses, training, streams.
labbench    Desk-scale experiment protocols emitting CSV tables.
cli         Command-line entry point (``imtok`` console script).
"""

from . import errors

__version__ = "0.1.0"

__all__ = ["errors", "__version__"]
