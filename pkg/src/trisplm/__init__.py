"""Partially linear models with bivariate penalized splines over triangulations."""
