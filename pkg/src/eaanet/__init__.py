"""EAANet: ResNet18 hybridized with efficient attention, on a from-scratch
numpy autograd with byte-exact peak-allocation tracking."""

from .attention import (AttentionConfig, EvitBlock, EvitBlockSpec, MhsaParams,
                        full_mhsa, linformer_mhsa, longformer2d_mhsa)
from .backbone import (AUGMENT_CONCAT, AUGMENT_NONE, AUGMENT_REPLACE,
                       ModelSpec, build_model, plain_resnet18)
from .bench import bench_latency, bench_peak_memory, growth_exponent
from .config import RunConfig, load_config, parse_config_text
from .data import Dataset, batch_iter, load_cifar10, synthetic_dataset
from .errors import (ConfigurationError, ContractError, DataFormatError,
                     DivergedError, FullyMaskedRowError, ShapeMismatchError)
from .gradcheck import check_gradients
from .tensor import (Tensor, backward, no_grad, tracker_current, tracker_peak,
                     tracker_reset)
from .train import TrainConfig, evaluate, train
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "EvitBlock", "EvitBlockSpec", "MhsaParams",
    "full_mhsa", "linformer_mhsa", "longformer2d_mhsa",
    "AUGMENT_CONCAT", "AUGMENT_NONE", "AUGMENT_REPLACE",
    "ModelSpec", "build_model", "plain_resnet18",
    "bench_latency", "bench_peak_memory", "growth_exponent",
    "RunConfig", "load_config", "parse_config_text",
    "Dataset", "batch_iter", "load_cifar10", "synthetic_dataset",
    "ConfigurationError", "ContractError", "DataFormatError",
    "DivergedError", "FullyMaskedRowError", "ShapeMismatchError",
    "check_gradients",
    "Tensor", "backward", "no_grad",
    "tracker_current", "tracker_peak", "tracker_reset",
    "TrainConfig", "evaluate", "train",
    "load_weights", "save_weights",
]
