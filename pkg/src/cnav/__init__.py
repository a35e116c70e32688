"""cnav: a desk-scale continual object-goal navigation benchmark.

Procedurally generated gridworld scenes stand in for scanned indoor
environments; a frozen random-projection encoder plus a gated recurrent
decoder stand in for pretrained vision backbones.  The package provides
six continual-learning strategies (finetune, LwF, model merge, data
replay, and feature replay with uniform or LOF-based keyframe
selection), the cumulative SR/SPL evaluation protocol, and a CLI that
runs the whole benchmark end to end from one master seed.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
