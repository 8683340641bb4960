import math
from typing import Callable, NamedTuple

PHI_RATIO = 2 / (1 + math.sqrt(5))


class GoldenSectionResult(NamedTuple):
    argmin: float
    minimum: float
    iterations: int
    converged: bool


def golden_section_minimize(
    func: Callable[[float], float],
    lower: float,
    upper: float,
    tol: float = 1e-10,
    max_iterations: int = 200,
) -> GoldenSectionResult:
    """
    Minimize a unimodal scalar function on [lower, upper] by golden-section search.

    The end points are compared against the interior estimate so that minima attained on
    the boundary are returned exactly.

    Args:
        func: The function to minimize. It may return +inf.
        lower: Lower end of the bracket.
        upper: Upper end of the bracket.
        tol: Absolute tolerance on the bracket width. Defaults to 1e-10.
        max_iterations: Iteration cap. Defaults to 200.

    Returns:
        GoldenSectionResult: The argmin, the minimum value, the iterations used and whether
            the bracket shrank below tolerance.
    """
    lo, hi = lower, upper
    x1 = hi - PHI_RATIO * (hi - lo)
    x2 = lo + PHI_RATIO * (hi - lo)
    f1, f2 = func(x1), func(x2)
    iteration = 0
    while iteration < max_iterations and hi - lo > tol:
        if f2 > f1:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - PHI_RATIO * (hi - lo)
            f1 = func(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + PHI_RATIO * (hi - lo)
            f2 = func(x2)
        iteration += 1

    argmin = 0.5 * (lo + hi)
    minimum = func(argmin)
    for edge in (lower, upper):
        f_edge = func(edge)
        if f_edge < minimum:
            argmin, minimum = edge, f_edge
    converged = hi - lo <= tol and not (math.isnan(f1) or math.isnan(f2))
    return GoldenSectionResult(argmin, minimum, iteration, converged)
