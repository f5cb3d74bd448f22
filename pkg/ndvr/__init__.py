"""
NDVR: distance-vector routing for Named-Data Networking MANETs, with a
deterministic wireless network simulator to run it in.
"""

__version__ = "0.1.0"
