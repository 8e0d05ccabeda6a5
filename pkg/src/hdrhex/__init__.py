"""Dynamic HDR radiance fields on a factorized space-time grid.

Learns a scene's time-varying linear radiance and density from LDR images
taken at unknown, varying exposures, then renders novel views at any time
in LDR (any exposure), linear HDR, or tone-mapped HDR.
"""

__version__ = "0.1.0"
