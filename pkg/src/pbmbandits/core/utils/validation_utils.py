import math
from typing import Sequence


def validate_probability(
    value: float, name: str, *, open_lower: bool = False, open_upper: bool = False
) -> float:
    """
    Validate that a scalar lies in [0, 1], optionally excluding either end.

    Args:
        value: The value to validate.
        name: The name used in the error message.
        open_lower: Whether 0 is excluded. Defaults to False.
        open_upper: Whether 1 is excluded. Defaults to False.

    Returns:
        float: The value converted to float.
    """
    value = float(value)
    lower_ok = value > 0.0 if open_lower else value >= 0.0
    upper_ok = value < 1.0 if open_upper else value <= 1.0
    if math.isnan(value) or not (lower_ok and upper_ok):
        interval = f"{'(' if open_lower else '['}0, 1{')' if open_upper else ']'}"
        raise ValueError(f"Invalid {name}: {value}, expecting a value in {interval}.")
    return value


def validate_arm(arm: int, num_arms: int) -> int:
    if not 0 <= arm < num_arms:
        raise ValueError(f"Invalid arm: {arm}, expecting an index in [0, {num_arms - 1}].")
    return int(arm)


def validate_position(position: int, num_positions: int) -> int:
    if not 0 <= position < num_positions:
        raise ValueError(
            f"Invalid position: {position}, expecting an index in [0, {num_positions - 1}]."
        )
    return int(position)


def validate_arms(arms: Sequence[int], num_arms: int, num_positions: int) -> None:
    """
    Validate an ordered list of displayed arms.

    Args:
        arms: The arms, position 0 first.
        num_arms: The number of arms K.
        num_positions: The number of positions L.
    """
    if len(arms) != num_positions:
        raise ValueError(
            f"Invalid action {tuple(arms)}: expecting {num_positions} arms, got {len(arms)}."
        )
    for arm in arms:
        if not 0 <= arm < num_arms:
            raise ValueError(
                f"Invalid action {tuple(arms)}: arm {arm} is outside [0, {num_arms - 1}]."
            )
    if len(set(arms)) != len(arms):
        raise ValueError(f"Invalid action {tuple(arms)}: arms must be distinct.")


def validate_bits(bits: Sequence[int], num_positions: int) -> None:
    if len(bits) != num_positions:
        raise ValueError(
            f"Invalid feedback {tuple(bits)}: expecting {num_positions} bits, got {len(bits)}."
        )
    if any(bit not in (0, 1) for bit in bits):
        raise ValueError(f"Invalid feedback {tuple(bits)}: every entry must be 0 or 1.")
