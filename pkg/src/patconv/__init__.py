"""Pattern-based sparse convolution: pattern libraries, pruning, compilation and execution.

Import the torch-based training helpers from :mod:`patconv.admm` and the
benchmark harness from :mod:`patconv.bench`; everything else is re-exported
here.
"""
from .compiler import (AccessTemplate, ExecutionPlan, FilterGroup, WorkUnit,
                       build_access_templates, compile_layer, compile_model, emit_plan_text,
                       filter_kernel_reorder, permute_channels, propagate_permutation,
                       read_plans, write_plans)
from .errors import (DataError, DomainError, FormatError, PatConvError, PlanMismatchError,
                     ShapeError, TrainingError, ValidationError)
from .executor import (CsrSparseLayer, ExecStats, csr_execute, execute_plan, reference_network,
                       run_network)
from .filters import (Filter2D, convolve_filters, elog_filter, gaussian_filter, log_1d_approx,
                      log_2d_approximations, log_filter)
from .model import (PRUNED, Conv, LayerInfo, Linear, MaxPool, ModelGraph, PrunedConvLayer, ReLU,
                    extract_layer_info, to_dense, validate_model)
from .patterns import (PatternMask, PatternSet, canonical_scp_set, covers_depth,
                       extended_pattern_set, interpolation_depth_bounds, mixture_expectation,
                       read_pattern_manifest, write_pattern_manifest)
from .pruning import (CompressionReport, PruneConfig, apply_connectivity, compression_stats,
                      connectivity_prune, magnitude_prune, pattern_prune_layer, project_kernel,
                      project_kernels, prune_layer)
from .serialization import (deserialize_model, load_model, read_tensor, save_model,
                            serialize_model, write_tensor)
from .tensor import (ConvSpec, DenseConvLayer, Tensor4D, conv2d_im2col, conv2d_reference,
                     mac_count, relative_error)

__version__ = "0.1.0"
