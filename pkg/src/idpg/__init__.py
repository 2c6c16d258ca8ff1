"""Instance-dependent prompt generation on a small numpy autodiff core."""

from .accountant import MethodSpec, ParamBudget, audit, count, efficiency_table
from .data import Example, TaskDataset, few_shot_sample, load_tsv, synth_task
from .generator import GeneratorConfig, PromptGenerator, StaticPrompt, generate_prompt
from .nn import Backbone, ClassifierHead, TransformerConfig, Vocab
from .phm import DenseLinear, PhmLinear, SharedAPool
from .prompting import IDPGModel, assemble_input
from .tensor import Tape, Tensor
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Backbone", "ClassifierHead", "DenseLinear", "Example", "GeneratorConfig", "IDPGModel",
    "MethodSpec", "ParamBudget", "PhmLinear", "PromptGenerator", "SharedAPool", "StaticPrompt",
    "Tape", "TaskDataset", "Tensor", "TrainConfig", "TransformerConfig", "Vocab",
    "assemble_input", "audit", "count", "efficiency_table", "evaluate", "few_shot_sample",
    "generate_prompt", "load_tsv", "synth_task", "train",
]
