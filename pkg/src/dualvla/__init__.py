"""dualvla: a self-contained vision-language-action trainer at desk scale.

Dual-level action representation (discrete DCT+BPE action tokens as
backbone supervision, vector-quantized latent action tokens as planning
context) feeding a flow-matching action expert through routed KV caches,
trained end to end on a synthetic 2D tabletop.
"""

from .backend import active_backend, available_backends, use_backend

__all__ = ["active_backend", "available_backends", "use_backend"]
__version__ = "0.1.0"
