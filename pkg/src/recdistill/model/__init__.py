from .config import (
    PAD_ID,
    PRESETS,
    ConfigError,
    ModelConfig,
    adapter_parameter_count,
    block_parameter_count,
    solve_adapter_bottleneck,
)
from .encoder import (
    Encoder,
    ForwardTrace,
    RecursiveStudent,
    TeacherModel,
    adapter_apply,
    block_forward,
    count_parameters,
    embed,
    materialize_unrolled,
    parameter_breakdown,
    student_forward,
    teacher_forward,
)
from .layers import Adapter, AdapterPair, Embeddings, InputError, Linear, MLMHead, Module, TransformerBlock

__all__ = [
    "PAD_ID",
    "PRESETS",
    "Adapter",
    "AdapterPair",
    "ConfigError",
    "Embeddings",
    "Encoder",
    "ForwardTrace",
    "InputError",
    "Linear",
    "MLMHead",
    "ModelConfig",
    "Module",
    "RecursiveStudent",
    "TeacherModel",
    "TransformerBlock",
    "adapter_apply",
    "adapter_parameter_count",
    "block_forward",
    "block_parameter_count",
    "count_parameters",
    "embed",
    "materialize_unrolled",
    "parameter_breakdown",
    "solve_adapter_bottleneck",
    "student_forward",
    "teacher_forward",
]
