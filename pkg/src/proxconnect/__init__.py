"""Forward/backward proximal quantizers for binarization-aware training."""
from .autodiff import CustomGradSpec, Tensor, apply_custom, grad_check, no_grad
from .decomposition import (DecompositionVerdict, SampledCurve, analyze_pair, check_factorization,
                            derivative_rule_pair, integrate_P, moreau_env)
from .errors import ConfigError, DivergenceError, FormatError
from .optim import (Schedule, TrainerState, bc_step, bregman_delta, gap_audit, pc_step, pcpp_step,
                    pq_step, rpc_step, schedule_mu)
from .quantizers import (PAIR_NAMES, ProximalQuantizer, QuantizerPair, bnn_prox, compose_with_prox,
                         get_pair, hard_tanh, linear_quantizer, sign_q, ss_backward, ss_forward)

__version__ = "0.1.0"

__all__ = [
    "CustomGradSpec", "Tensor", "apply_custom", "grad_check", "no_grad",
    "DecompositionVerdict", "SampledCurve", "analyze_pair", "check_factorization",
    "derivative_rule_pair", "integrate_P", "moreau_env",
    "ConfigError", "DivergenceError", "FormatError",
    "Schedule", "TrainerState", "bc_step", "bregman_delta", "gap_audit", "pc_step", "pcpp_step",
    "pq_step", "rpc_step", "schedule_mu",
    "PAIR_NAMES", "ProximalQuantizer", "QuantizerPair", "bnn_prox", "compose_with_prox", "get_pair",
    "hard_tanh", "linear_quantizer", "sign_q", "ss_backward", "ss_forward",
]
