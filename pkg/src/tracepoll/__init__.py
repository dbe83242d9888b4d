"""Unobtrusive polling of social-media users.

Pipeline: acquire a dated subject pool from platform queries, screen and
quota-sample it, extract structured survey features from each user's digital
trace via a pluggable annotator, smooth the responses with a hierarchical
Bayesian model over a stratification frame, post-stratify to representative
estimates, and score them.
"""

__version__ = "0.1.0"
