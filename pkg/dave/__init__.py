"""DAVE: detection and annotation for vehicles.

Two networks: a shallow fully-convolutional proposal net (FVPN) and a deeper
attributes learning net (ALN), trained jointly and run as a two-stage detector.
"""

__version__ = "0.1.0"
