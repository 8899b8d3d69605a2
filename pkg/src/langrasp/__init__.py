"""Language-conditioned grasp detection toolkit.

Subpackages:
    geometry    planar grasp poses, oriented rectangles, map encodings
    data        synthetic scenes, part annotations, instruction generation, manifests
    vlm         word-level multimodal causal LM, target-span extraction, adapters
    grasp_head  fused convolutional grasp detector and its loss
    training    combined objective, two-phase schedule, checkpoints
    baselines   bag-of-words conditioned detector and grounder+detector pipeline
    evaluation  rectangle metric evaluation, reports, overlays
    cli         command-line entry points
"""

__version__ = "0.1.0"
