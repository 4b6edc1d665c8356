"""Progressive training (PGT) of temporal convolutional networks on long sequences."""
from .autodiff import Node, Parameter, backward, finite_difference_grad, stop_gradient
from .errors import ConfigError, ContractError, DomainError, NumericError, ScheduleError, ShapeError
from .layers import (LayerSpec, LayerState, MarkovState, Model, ModelSpec, OperatorVariant,
                     TemporalConvParams, classifier_head, cmco_aggregate, local_temporal_conv,
                     markov_step_conv, pmco_update)
from .schedule import DprMode, ProgressiveSchedule, dpr_sample, make_schedule
from .training import (SGD, TrainConfig, integrated_train_step, lr_at, progressive_train_step,
                       sgd_update)
from .analysis import (InferenceMode, SyntheticTaskSpec, compute_erf, forward_equivalence_check,
                       gen_synthetic_dataset, infer, peak_activation_memory)

__version__ = "0.1.0"
