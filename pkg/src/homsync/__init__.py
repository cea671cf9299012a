"""Two-clock synchronization through HOM dip locking of entangled photon pairs.

A seeded event-level simulator of the fiber plant, the dither lock that keeps
the two paths balanced, the arrival-time correlator that extracts the clock
offset, and the TDEV machinery used to judge the result.
"""

__version__ = "0.1.0"
