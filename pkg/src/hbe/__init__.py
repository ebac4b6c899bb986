"""Patch-based image restoration under a normal-Wishart hyperprior.

Subpackages: core (joint MAP on patch groups), patches (extraction, search,
grouping, aggregation), solver (full restoration pipeline), degrade (synthetic
degradations), hdr (spatially-varying-exposure capture and reconstruction),
formats/metrics/cli (I/O, PSNR, command line).
"""

__version__ = "0.1.0"
