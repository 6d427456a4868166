"""SimNets: similarity and MEX operators, deep SimNets, pre-training and training."""
from .mex import BETA_SWITCH, MexUnit, PoolSpec, mex, mex_grad, mex_pool, mex_with_offsets
from .network import (
    LayerConfig,
    MlpConvBlock,
    NetworkSpec,
    SimNetMlp,
    build_network,
    mlp_forward,
    mlp_predict,
    mlpconv_forward,
    network_backward,
    network_forward,
    network_predict,
)
from .similarity import ConvLpSim, SimilarityLayer, conv_lp_sim, similarity, similarity_grads, similarity_map
from .tensor import PatchGeometry, extract_patches

__version__ = "0.1.0"

__all__ = [
    "BETA_SWITCH", "ConvLpSim", "LayerConfig", "MexUnit", "MlpConvBlock", "NetworkSpec", "PatchGeometry",
    "PoolSpec", "SimNetMlp", "SimilarityLayer", "build_network", "conv_lp_sim", "extract_patches", "mex",
    "mex_grad", "mex_pool", "mex_with_offsets", "mlp_forward", "mlp_predict", "mlpconv_forward",
    "network_backward", "network_forward", "network_predict", "similarity", "similarity_grads",
    "similarity_map",
]
