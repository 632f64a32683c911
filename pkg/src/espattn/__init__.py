"""Doubly-stochastic attention from expected sliced transport plans.

The main entry points are :func:`esp_attention_forward` and
:func:`esp_attention_backward`; Sinkhorn, softmax and differential attention
are provided as baselines.
"""
from .annealing import AnnealSchedule, effective_mode, temperature_at
from .attention import (
    AttentionConfig,
    AttentionTape,
    HeadWeights,
    attention_backward,
    attention_forward,
    differential_attention,
    esp_attention_backward,
    esp_attention_forward,
    multi_head,
    sinkhorn_attention,
    softmax_attention,
)
from .errors import (
    DivergenceError,
    EspError,
    NonFiniteError,
    ParameterError,
    ShapeError,
    SizeError,
    UnsupportedModeError,
)
from .sorting import SoftPermutation, hard_argsort_perm, soft_sort, soft_sort_backward
from .transport import (
    EspWeights,
    SliceSet,
    TransportPlan,
    cross_plan,
    esp_plan,
    esp_weights,
    exact_ot_oracle,
    interpolation_matrix,
    sinkhorn_plan,
    slice_cost,
    slice_plan,
)

__version__ = "0.1.0"
