"""Bit- and sample-exact LR-FHSS physical-layer transceiver toolkit.

Subpackages cover the air-interface profiles and time-on-air model
(`profiles`), forward error correction and framing (`coding`, `packet`),
waveform synthesis and demodulation (`modem`), channel impairments
(`channel`), IQ capture files (`iqfile`), the receiver's channelizer,
block store, and header detector (`detector`), packet reception
(`rxchain`), the Monte Carlo harness (`sim`), figure rendering
(`plotting`), and the command-line front end (`cli`).
"""

__version__ = "0.1.0"

__all__ = [
    "profiles",
    "coding",
    "packet",
    "modem",
    "channel",
    "iqfile",
    "detector",
    "rxchain",
    "sim",
    "plotting",
    "cli",
    "__version__",
]
