"""Frame-based generative world model.

Each frame of an explorable scene is synthesized independently from a
reference image, a point-cloud anchor rendered at the target view, and
camera poses.  The package covers the full pipeline: procedural scene data,
training-pair construction, conditional diffusion training, few-step
distillation, evaluation, and an interactive streaming server.
"""

__version__ = "0.1.0"
