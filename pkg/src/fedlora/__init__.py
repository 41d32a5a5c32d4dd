"""Federated training of small CNNs that exchanges only low-rank conv
adapters, with optional integer quantization and byte-exact communication
accounting."""

from .adapters import AdapterPair, AdaptedModel, FreezePolicy, attach_adapters, merge_adapter
from .data import Dataset, PartitionMap, lda_partition, load_cifar10, synthetic_dataset
from .federation import (
    ClientUpdate,
    FederationConfig,
    FederatedRun,
    RoundReport,
    aggregate,
    run_experiment,
    sample_clients,
)
from .models import (
    ModelSpec,
    ParamSet,
    build_resnet8,
    build_resnet18,
    build_tiny,
    count_parameters,
    forward,
    group_norm_groups_for,
)
from .quant import (
    QuantParams,
    QuantizedTensor,
    compute_affine_params,
    dequantize,
    quantize,
    quantized_payload_bytes,
)
from .tensor import SGDMomentum, Tensor, sgd_momentum_step
from .wire import CostLedger, deserialize, message_size_report, serialize, tcc

__version__ = "0.1.0"
