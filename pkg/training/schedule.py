import math

from core.errors import ContractError


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    """Transformer schedule: linear warmup, then inverse square-root decay.

    lr = d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
    """
    if step < 1:
        raise ContractError(f"learning-rate step must be >= 1, got {step}")
    if warmup < 1 or d_model < 1:
        raise ContractError(f"d_model and warmup must be positive, got {d_model} and {warmup}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def peak_lr(d_model: int, warmup: int) -> float:
    return 1.0 / math.sqrt(d_model * warmup)
