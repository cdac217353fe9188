"""naflow: per-layer attention flow for small sequential CNNs.

Runs a traced forward pass, reconstructs back-propagated feature maps through
exact/affine layer inverses while abandoning neurons not used in the
decision, cascades importance coefficients backward, and renders one
attention map per layer.
"""
from .attribution import (
    CoefficientStack,
    cascade_coefficients,
    contribution_weights,
    cosine_similarity,
    seed_class_score,
    seed_similarity,
)
from .flow import (
    AttentionFlowResult,
    AttentionMap,
    build_flow,
    colormap,
    layer_attention,
    montage,
    normalize_map,
    render_heatmap,
)
from .forward import ForwardTrace, forward_trace, head_vjp, predict
from .model import (
    BatchNorm2d,
    ClassifierHead,
    Conv2d,
    EmbeddingHead,
    LeakyReLU,
    MaxPool2d,
    ModelGraph,
    ReLU,
    build_graph,
    load_model,
    write_model,
)
from .nabp import (
    BpfmStack,
    NeuronTimesReport,
    RetentionSet,
    backprop_feature_maps,
    compute_retention,
    count_neuron_times,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionFlowResult",
    "AttentionMap",
    "BatchNorm2d",
    "BpfmStack",
    "ClassifierHead",
    "CoefficientStack",
    "Conv2d",
    "EmbeddingHead",
    "ForwardTrace",
    "LeakyReLU",
    "MaxPool2d",
    "ModelGraph",
    "NeuronTimesReport",
    "ReLU",
    "RetentionSet",
    "backprop_feature_maps",
    "build_flow",
    "build_graph",
    "cascade_coefficients",
    "colormap",
    "compute_retention",
    "contribution_weights",
    "cosine_similarity",
    "count_neuron_times",
    "forward_trace",
    "head_vjp",
    "layer_attention",
    "load_model",
    "montage",
    "normalize_map",
    "predict",
    "render_heatmap",
    "seed_class_score",
    "seed_similarity",
    "write_model",
]
