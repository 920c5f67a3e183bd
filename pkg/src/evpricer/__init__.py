"""Locational electricity pricing for EV charging.

Solves a bilevel power-traffic program: the distribution operator prices
charging stations through its optimal power flow dual, while drivers route
and charge as price takers.  The driver response is computed exactly as a
piecewise-linear demand map by multiparametric sensitivity analysis, and
the operator's problem is solved region by region.
"""

__version__ = "0.1.0"
