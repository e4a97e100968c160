"""3D Kolmogorov-Arnold convolution networks for hyperspectral patch classification.

Everything runs on numpy arrays. The spline kernels are compiled with numba.
"""
from .bspline import SplineGrid, bspline_bases, cox_de_boor_reference, fit_coefficients, uniform_grid
from .conv3d import ConvGeometry, Conv3d, KanConv3d, linear_conv3d, naive_conv3d, unfold3d
from .errors import KanetError
from .hsi import LabeledCube, Metrics, compute_metrics, extract_patches, read_cube, stratified_split, synth_cube, write_cube
from .kan_linear import GridUpdateConfig, KANLinear
from .model import KANet, NetworkConfig, count_parameters, expected_parameter_count
from .tensor import grad_check
from .train import Adam, TrainConfig, cross_entropy, evaluate, train

__version__ = "0.1.0"
