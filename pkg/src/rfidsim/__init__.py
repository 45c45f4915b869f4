"""Waveform-level simulator for FDMA-parallel UHF RFID.

Modules: band planning and channelization (bands), Gen-2 codecs (phy),
RF impairments and pre-distortion (impairments), tag models (tag), reader
demod and MAC (reader), the collision-recovery baseline (baseline), and
the scenario harness (harness, engine, cli).
"""

__version__ = "0.1.0"
